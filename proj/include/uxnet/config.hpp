#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace uxnet {

using json = nlohmann::json;

/// Raised for invalid or unparseable configuration; the message lists every
/// violated constraint.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class ScalingMode { DCS, MLP, NONE };
enum class ConvMode { DEPTHWISE, STANDARD };
enum class LossMode { DICE, DICE_CE };

std::string to_string(ScalingMode m);
std::string to_string(ConvMode m);
std::string to_string(LossMode m);

struct UXNetConfig {
    int64_t in_channels = 1;
    int64_t num_classes = 5;
    std::array<int64_t, 4> stage_channels{48, 96, 192, 384};
    std::array<int64_t, 4> stage_depths{2, 2, 2, 2};
    int64_t kernel_size = 7;
    /// Patch-embedding kernel; follows kernel_size when absent.
    std::optional<int64_t> patch_kernel;
    ScalingMode scaling_mode = ScalingMode::DCS;
    ConvMode conv_mode = ConvMode::DEPTHWISE;
    /// Width of the 1/32 level; absent means the encoder stops at 1/16.
    std::optional<int64_t> bottleneck_channels = 768;
    /// Residual unit applied at the 1/32 level.
    bool bottleneck_block = true;
    bool deep_supervision = false;
    std::array<int64_t, 3> patch_size{96, 96, 96};

    /// The reference configuration (C=48, depths 2,2,2,2, hidden 768, k=7).
    static UXNetConfig reference();
    /// Stage-3 depth 8, hidden width 384, no bottleneck residual unit.
    static UXNetConfig optimized();
    /// Desk-scale model: channels 8,16,32,64, no 1/32 level, patch 32^3.
    static UXNetConfig tiny();

    int64_t effective_patch_kernel() const { return patch_kernel.value_or(kernel_size); }
    bool has_bottleneck() const { return bottleneck_channels.has_value(); }
    /// Total spatial downsampling of the encoder.
    int64_t depth_factor() const { return has_bottleneck() ? 32 : 16; }
    int num_aux_heads() const { return deep_supervision ? 3 : 0; }

    /// Throws ConfigError listing every violated invariant.
    void validate() const;

    bool operator==(const UXNetConfig&) const = default;
};

struct AugmentParams {
    double rotation_deg = 30.0;
    double scale = 0.1;
    double intensity_offset = 0.1;
    double p_rotate = 0.5;
    double p_scale = 0.5;
    double p_offset = 0.5;

    void validate() const;
    bool operator==(const AugmentParams&) const = default;
};

struct TrainConfig {
    int64_t steps = 40000;
    int64_t batch_size = 2;
    int64_t crops_per_volume = 2;
    int64_t eval_interval = 50;
    /// Save a resumable checkpoint every N steps (0 disables).
    int64_t checkpoint_interval = 0;
    LossMode loss_mode = LossMode::DICE;
    bool loss_include_background = true;
    std::vector<double> deep_supervision_weights{1.0, 0.5, 0.25, 0.125};
    double lr = 1e-4;
    std::array<double, 2> betas{0.9, 0.999};
    double eps = 1e-8;
    double weight_decay = 0.08;
    double plateau_factor = 0.9;
    int64_t plateau_patience = 10;
    double foreground_prob = 2.0 / 3.0;
    double eval_overlap = 0.5;
    bool augment = true;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
    std::string manifest;
    /// Intensity window applied before normalization; absent disables clipping.
    std::optional<std::array<double, 2>> clip = std::array<double, 2>{-175.0, 250.0};
    std::array<double, 2> percentiles{1.0, 99.0};

    void validate() const;
    bool operator==(const DataConfig&) const = default;
};

struct SynthSpec {
    int64_t num_volumes = 20;
    std::array<int64_t, 3> extents{64, 64, 64};
    int64_t num_classes = 3;
    int64_t shapes_per_volume = 4;
    double noise_sigma = 20.0;

    void validate() const;
    bool operator==(const SynthSpec&) const = default;
};

/// Everything a CLI run reads: model, training, augmentation, data and
/// generator settings plus the global seed.
struct CliConfig {
    UXNetConfig model;
    TrainConfig train;
    AugmentParams augment;
    DataConfig data;
    SynthSpec synth;
    uint64_t seed = 0;
    bool deterministic = false;
    std::string out_dir = "runs/default";

    void validate() const;
    bool operator==(const CliConfig&) const = default;
};

json to_json(const UXNetConfig& c);
json to_json(const AugmentParams& a);
json to_json(const TrainConfig& t);
json to_json(const DataConfig& d);
json to_json(const SynthSpec& s);
json to_json(const CliConfig& c);

// Strict parsers: unknown keys and wrong types raise ConfigError; missing
// keys keep their defaults.
UXNetConfig model_config_from_json(const json& j);
AugmentParams augment_from_json(const json& j);
TrainConfig train_config_from_json(const json& j);
DataConfig data_config_from_json(const json& j);
SynthSpec synth_spec_from_json(const json& j);
CliConfig cli_config_from_json(const json& j);

CliConfig load_cli_config(const std::string& path);

}  // namespace uxnet
