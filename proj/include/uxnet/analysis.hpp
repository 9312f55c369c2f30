#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "uxnet/config.hpp"
#include "uxnet/model.hpp"
#include "uxnet/tensor.hpp"

namespace uxnet {

/// Per-element costs charged to non-convolution layers. They are reported
/// separately and never folded into the convolution FLOP totals.
struct ElementwiseCosts {
    static constexpr int64_t norm = 5;        // subtract mean, square, scale, gamma, beta
    static constexpr int64_t gelu = 8;
    static constexpr int64_t leaky_relu = 1;
    static constexpr int64_t residual_add = 1;
};

struct LayerCost {
    std::string name;   // matches the parameter-registry prefix
    std::string kind;   // conv, conv_transpose, norm, gelu, leaky_relu, add, upsample
    int64_t params = 0;
    int64_t macs = 0;
    int64_t elementwise_flops = 0;
    Shape output_shape;
};

struct RfStep {
    std::string layer;
    int64_t kernel = 1;
    int64_t stride = 1;
    int64_t rf = 1;
    int64_t jump = 1;
};

struct CostReport {
    static constexpr const char* kConvention =
        "FLOPs = 2 x MACs over convolutions (1 x MAC co-reported); norm/activation costs itemized separately";

    Shape input_shape;
    std::vector<LayerCost> layers;
    /// Parameter totals per group ("encoder.stage0", "decoder.up1", "head", ...).
    std::map<std::string, int64_t> group_params;
    int64_t total_params = 0;
    int64_t total_macs = 0;
    int64_t elementwise_flops = 0;
    std::vector<RfStep> rf_trace;

    int64_t flops_2mac() const { return 2 * total_macs; }
    int64_t flops_1mac() const { return total_macs; }
    int64_t rf_exit() const { return rf_trace.empty() ? 1 : rf_trace.back().rf; }
};

/// Reference FLOP input: 1 x in_channels x 96^3.
Shape reference_input_shape(const UXNetConfig& config);

/// Registry grouping key for a parameter name.
std::string param_group(const std::string& name);

/// Exact parameter counts read from a built model's registry.
template <typename T>
CostReport count_params(const UXNetModel<T>& model);

/// Analytic walk of the architecture: parameters, MACs and elementwise work
/// for every layer at `input_shape`, plus the receptive-field trace. Needs no
/// weights, so it is cheap even for very large variants.
CostReport count_flops(const UXNetConfig& config, const Shape& input_shape);

/// r <- r + (k - 1) * j, j <- j * s along the encoder path.
std::vector<RfStep> receptive_field(const UXNetConfig& config);

enum class TableFormat { Markdown, Csv, Json };
TableFormat parse_table_format(const std::string& s);

struct AblationRow {
    std::string name;
    UXNetConfig config;
};

struct AblationTable {
    std::string document;
    /// Rows whose config failed; the message is also embedded in the document.
    std::vector<std::string> failures;
};

/// One row per config: name, params (M, 1 decimal), FLOPs (G, 1 decimal, both
/// conventions) and receptive field at the encoder exit. A failing row is
/// reported and the remaining rows are still emitted.
AblationTable emit_ablation_table(const std::vector<AblationRow>& rows, TableFormat format,
                                  const std::vector<int64_t>& spatial = {96, 96, 96});

/// Kernel sweep over `kernels` with the patch-embedding kernel pinned.
std::vector<AblationRow> kernel_sweep(const UXNetConfig& base, const std::vector<int64_t>& kernels,
                                      int64_t pinned_patch_kernel = 7);

/// Named variants: reference, optimized, standard-conv, mlp, no-scaling.
AblationRow named_variant(const std::string& name);
std::vector<std::string> variant_names();

}  // namespace uxnet
