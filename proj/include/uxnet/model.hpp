#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "uxnet/autodiff.hpp"
#include "uxnet/config.hpp"
#include "uxnet/nn.hpp"
#include "uxnet/rng.hpp"

namespace uxnet {

/// Owns every Parameter of a model in creation order; names are unique.
template <typename T>
class ParamStore {
public:
    enum class Init { TruncNormal, Zeros, Ones };

    ParamStore() = default;
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;

    Parameter<T>* create(const std::string& name, Shape shape, Init init, Rng& rng,
                         double stddev = 0.02);

    Parameter<T>* find(const std::string& name);
    const std::vector<std::unique_ptr<Parameter<T>>>& all() const { return params_; }
    std::vector<std::string> names() const;
    int64_t total_numel() const;
    void zero_grad();

private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::map<std::string, size_t> index_;
};

template <typename T>
struct ConvLayer {
    Conv3dSpec spec;
    Parameter<T>* weight = nullptr;
    Parameter<T>* bias = nullptr;
    bool transposed = false;

    static ConvLayer make(ParamStore<T>& store, const std::string& name, const Conv3dSpec& spec,
                          Rng& rng, bool transposed = false);
    Var<T> operator()(const Var<T>& x) const;
    int64_t param_count() const;
};

template <typename T>
struct NormLayer {
    NormSpec spec;
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;

    static NormLayer make(ParamStore<T>& store, const std::string& name, const NormSpec& spec,
                          Rng& rng);
    Var<T> operator()(const Var<T>& x) const;
};

/// Large-kernel encoder block:
///   zhat = DWC(LN1(z)) + z
///   out  = DCS(LN2(zhat)) + zhat
/// DCS expands each channel 4x with a per-channel 1x1x1 conv, applies GELU and
/// compresses each group of 4 back to its source channel. MLP mode uses two
/// dense 1x1x1 convs instead; NONE returns zhat.
template <typename T>
struct UXNetBlock {
    int64_t channels = 0;
    ScalingMode scaling = ScalingMode::DCS;
    NormLayer<T> ln1, ln2;
    ConvLayer<T> dwc;
    ConvLayer<T> expand, compress;

    static UXNetBlock make(ParamStore<T>& store, const std::string& name, int64_t channels,
                           int64_t kernel, ScalingMode scaling, ConvMode conv_mode, Rng& rng);
    Var<T> operator()(const Var<T>& z) const;
};

/// Decoder residual unit: conv3-IN-lrelu-conv3-IN plus a shortcut (1x1x1
/// conv + IN when the width changes), followed by lrelu. With `single_conv`
/// the main path is one conv3-IN and the shortcut is the identity.
template <typename T>
struct ResUnit {
    ConvLayer<T> conv1, conv2, proj;
    NormLayer<T> norm1, norm2, proj_norm;
    bool single_conv = false;

    static constexpr double kSlope = 0.01;

    static ResUnit make(ParamStore<T>& store, const std::string& name, int64_t in, int64_t out,
                        Rng& rng, bool single_conv = false);
    Var<T> operator()(const Var<T>& x) const;
};

template <typename T>
struct ModelOutput {
    Var<T> logits;
    /// Auxiliary logits at full resolution, shallowest level first (1/2, 1/4, 1/8).
    std::vector<Var<T>> aux;
};

template <typename T>
struct EncoderFeatures {
    /// Stage outputs at 1/2, 1/4, 1/8 and 1/16 resolution.
    std::vector<Var<T>> stages;
    /// Feature at 1/32 resolution, undefined without a bottleneck.
    Var<T> bottleneck;
};

template <typename T>
class UXNetModel {
public:
    /// Builds and initializes every parameter from `seed`.
    UXNetModel(const UXNetConfig& config, uint64_t seed);
    UXNetModel(const UXNetModel&) = delete;
    UXNetModel& operator=(const UXNetModel&) = delete;

    const UXNetConfig& config() const { return config_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

    Var<T> patch_embed(const Var<T>& x) const;
    Var<T> downsample(const Var<T>& x, int stage) const;
    EncoderFeatures<T> encode(const Var<T>& x) const;
    ModelOutput<T> forward(const Var<T>& x) const;

    const std::vector<std::vector<UXNetBlock<T>>>& stages() const { return stages_; }

    /// Checks rank, channel count and divisibility of a network input.
    void check_input(const Shape& s) const;

private:
    UXNetConfig config_;
    ParamStore<T> store_;

    ConvLayer<T> patch_embed_;
    std::vector<std::vector<UXNetBlock<T>>> stages_;
    std::vector<ConvLayer<T>> downsample_;  // 3 between stages, plus one into the 1/32 level
    std::unique_ptr<ResUnit<T>> bottleneck_;

    ResUnit<T> input_unit_;
    std::vector<ResUnit<T>> skip_units_;  // one per stage
    std::vector<ConvLayer<T>> up_convs_;   // deepest first
    std::vector<ResUnit<T>> up_units_;
    ConvLayer<T> head_;
    std::vector<ConvLayer<T>> aux_heads_;
};

/// Deep-supervision weights normalized to sum 1, main head first.
std::vector<double> normalized_weights(const std::vector<double>& w);

}  // namespace uxnet
