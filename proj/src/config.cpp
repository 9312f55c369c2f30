#include "uxnet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace uxnet {

std::string to_string(ScalingMode m) {
    switch (m) {
        case ScalingMode::DCS: return "DCS";
        case ScalingMode::MLP: return "MLP";
        case ScalingMode::NONE: return "NONE";
    }
    return "?";
}

std::string to_string(ConvMode m) { return m == ConvMode::DEPTHWISE ? "DEPTHWISE" : "STANDARD"; }

std::string to_string(LossMode m) { return m == LossMode::DICE ? "DICE" : "DICE_CE"; }

namespace {

std::string join(const std::vector<std::string>& items, const char* sep = "; ") {
    std::string out;
    for (size_t i = 0; i < items.size(); ++i) {
        if (i) out += sep;
        out += items[i];
    }
    return out;
}

void raise_if(const std::vector<std::string>& errors, const char* what) {
    if (!errors.empty()) throw ConfigError(std::string(what) + ": " + join(errors));
}

// ---- strict value parsing -------------------------------------------------

void parse(const json& j, int64_t& out) {
    if (!j.is_number_integer()) throw ConfigError("expected an integer");
    out = j.get<int64_t>();
}

void parse(const json& j, uint64_t& out) {
    if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<int64_t>() < 0)) {
        throw ConfigError("expected a non-negative integer");
    }
    out = j.get<uint64_t>();
}

void parse(const json& j, double& out) {
    if (!j.is_number()) throw ConfigError("expected a number");
    out = j.get<double>();
}

void parse(const json& j, bool& out) {
    if (!j.is_boolean()) throw ConfigError("expected true or false");
    out = j.get<bool>();
}

void parse(const json& j, std::string& out) {
    if (!j.is_string()) throw ConfigError("expected a string");
    out = j.get<std::string>();
}

template <typename V, size_t N>
void parse(const json& j, std::array<V, N>& out) {
    if (!j.is_array() || j.size() != N) {
        throw ConfigError("expected an array of " + std::to_string(N) + " elements");
    }
    for (size_t i = 0; i < N; ++i) parse(j[i], out[i]);
}

template <typename V>
void parse(const json& j, std::vector<V>& out) {
    if (!j.is_array()) throw ConfigError("expected an array");
    out.assign(j.size(), V{});
    for (size_t i = 0; i < j.size(); ++i) parse(j[i], out[i]);
}

template <typename V>
void parse(const json& j, std::optional<V>& out) {
    if (j.is_null()) {
        out.reset();
        return;
    }
    V v{};
    parse(j, v);
    out = v;
}

template <typename E>
void parse_enum(const json& j, E& out, std::initializer_list<E> values) {
    if (!j.is_string()) throw ConfigError("expected a string");
    const auto s = j.get<std::string>();
    std::vector<std::string> names;
    for (E v : values) {
        if (to_string(v) == s) {
            out = v;
            return;
        }
        names.push_back(to_string(v));
    }
    throw ConfigError("unknown value \"" + s + "\" (expected one of " + join(names, ", ") + ")");
}

void parse(const json& j, ScalingMode& m) {
    parse_enum(j, m, {ScalingMode::DCS, ScalingMode::MLP, ScalingMode::NONE});
}
void parse(const json& j, ConvMode& m) { parse_enum(j, m, {ConvMode::DEPTHWISE, ConvMode::STANDARD}); }
void parse(const json& j, LossMode& m) { parse_enum(j, m, {LossMode::DICE, LossMode::DICE_CE}); }

/// Reads known keys from one JSON object and rejects anything else.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
        if (!j_.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
    }

    template <typename V>
    void get(const char* key, V& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            parse(*it, out);
        } catch (const ConfigError& e) {
            throw ConfigError(ctx_ + "." + key + ": " + e.what());
        }
    }

    /// Accepts a key that the caller parses itself.
    void mark(const char* key) { seen_.insert(key); }

    void finish() const {
        std::vector<std::string> unknown;
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) unknown.push_back("\"" + it.key() + "\"");
        }
        if (!unknown.empty()) throw ConfigError(ctx_ + ": unknown key(s) " + join(unknown, ", "));
    }

private:
    const json& j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

template <typename V>
json opt(const std::optional<V>& v) {
    return v ? json(*v) : json(nullptr);
}

}  // namespace

// ---- UXNetConfig ------------------------------------------------------------

UXNetConfig UXNetConfig::reference() { return UXNetConfig{}; }

UXNetConfig UXNetConfig::optimized() {
    UXNetConfig c;
    c.stage_depths = {2, 2, 8, 2};
    c.bottleneck_channels = 384;
    c.bottleneck_block = false;
    return c;
}

UXNetConfig UXNetConfig::tiny() {
    UXNetConfig c;
    c.num_classes = 3;
    c.stage_channels = {8, 16, 32, 64};
    c.bottleneck_channels.reset();
    c.bottleneck_block = false;
    c.patch_size = {32, 32, 32};
    return c;
}

void UXNetConfig::validate() const {
    std::vector<std::string> e;
    if (in_channels < 1) e.push_back("in_channels must be >= 1");
    if (num_classes < 2) e.push_back("num_classes must be >= 2 (background plus one class)");
    for (size_t s = 0; s < 4; ++s) {
        if (stage_channels[s] < 1) e.push_back("stage_channels[" + std::to_string(s) + "] must be >= 1");
        if (stage_depths[s] < 1) e.push_back("stage_depths[" + std::to_string(s) + "] must be >= 1");
    }
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        e.push_back("kernel_size must be odd and >= 1 (got " + std::to_string(kernel_size) + ")");
    }
    if (patch_kernel && (*patch_kernel < 1 || *patch_kernel % 2 == 0)) {
        e.push_back("patch_kernel must be odd and >= 1 (got " + std::to_string(*patch_kernel) + ")");
    }
    if (bottleneck_channels && *bottleneck_channels < 1) e.push_back("bottleneck_channels must be >= 1");
    const int64_t f = depth_factor();
    for (size_t a = 0; a < 3; ++a) {
        if (patch_size[a] < 1 || patch_size[a] % f != 0) {
            e.push_back("patch_size[" + std::to_string(a) + "]=" + std::to_string(patch_size[a]) +
                        " must be a positive multiple of " + std::to_string(f));
        }
    }
    raise_if(e, "invalid model config");
}

json to_json(const UXNetConfig& c) {
    return json{{"in_channels", c.in_channels},
                {"num_classes", c.num_classes},
                {"stage_channels", c.stage_channels},
                {"stage_depths", c.stage_depths},
                {"kernel_size", c.kernel_size},
                {"patch_kernel", opt(c.patch_kernel)},
                {"scaling_mode", to_string(c.scaling_mode)},
                {"conv_mode", to_string(c.conv_mode)},
                {"bottleneck_channels", opt(c.bottleneck_channels)},
                {"bottleneck_block", c.bottleneck_block},
                {"deep_supervision", c.deep_supervision},
                {"patch_size", c.patch_size}};
}

UXNetConfig model_config_from_json(const json& j) {
    UXNetConfig c;
    ObjectReader r(j, "model");
    r.get("in_channels", c.in_channels);
    r.get("num_classes", c.num_classes);
    r.get("stage_channels", c.stage_channels);
    r.get("stage_depths", c.stage_depths);
    r.get("kernel_size", c.kernel_size);
    r.get("patch_kernel", c.patch_kernel);
    r.get("scaling_mode", c.scaling_mode);
    r.get("conv_mode", c.conv_mode);
    r.get("bottleneck_channels", c.bottleneck_channels);
    r.get("bottleneck_block", c.bottleneck_block);
    r.get("deep_supervision", c.deep_supervision);
    r.get("patch_size", c.patch_size);
    r.finish();
    return c;
}

// ---- AugmentParams ----------------------------------------------------------

void AugmentParams::validate() const {
    std::vector<std::string> e;
    if (rotation_deg < 0) e.push_back("rotation_deg must be >= 0");
    if (scale < 0 || scale >= 1) e.push_back("scale must be in [0, 1)");
    if (intensity_offset < 0) e.push_back("intensity_offset must be >= 0");
    for (auto [name, p] : {std::pair{"p_rotate", p_rotate}, std::pair{"p_scale", p_scale},
                           std::pair{"p_offset", p_offset}}) {
        if (p < 0 || p > 1) e.push_back(std::string(name) + " must be in [0, 1]");
    }
    raise_if(e, "invalid augmentation");
}

json to_json(const AugmentParams& a) {
    return json{{"rotation_deg", a.rotation_deg}, {"scale", a.scale},
                {"intensity_offset", a.intensity_offset}, {"p_rotate", a.p_rotate},
                {"p_scale", a.p_scale}, {"p_offset", a.p_offset}};
}

AugmentParams augment_from_json(const json& j) {
    AugmentParams a;
    ObjectReader r(j, "augment");
    r.get("rotation_deg", a.rotation_deg);
    r.get("scale", a.scale);
    r.get("intensity_offset", a.intensity_offset);
    r.get("p_rotate", a.p_rotate);
    r.get("p_scale", a.p_scale);
    r.get("p_offset", a.p_offset);
    r.finish();
    return a;
}

// ---- TrainConfig ------------------------------------------------------------

void TrainConfig::validate() const {
    std::vector<std::string> e;
    if (steps < 1) e.push_back("steps must be >= 1");
    if (batch_size < 1) e.push_back("batch_size must be >= 1");
    if (crops_per_volume < 1) e.push_back("crops_per_volume must be >= 1");
    if (eval_interval < 1) e.push_back("eval_interval must be >= 1");
    if (checkpoint_interval < 0) e.push_back("checkpoint_interval must be >= 0");
    if (!(lr > 0)) e.push_back("lr must be > 0");
    if (betas[0] < 0 || betas[0] >= 1 || betas[1] < 0 || betas[1] >= 1) {
        e.push_back("betas must be in [0, 1)");
    }
    if (!(eps > 0)) e.push_back("eps must be > 0");
    if (weight_decay < 0) e.push_back("weight_decay must be >= 0");
    if (!(plateau_factor > 0 && plateau_factor < 1)) e.push_back("plateau_factor must be in (0, 1)");
    if (plateau_patience < 0) e.push_back("plateau_patience must be >= 0");
    if (foreground_prob < 0 || foreground_prob > 1) e.push_back("foreground_prob must be in [0, 1]");
    if (eval_overlap < 0 || eval_overlap >= 1) e.push_back("eval_overlap must be in [0, 1)");
    if (deep_supervision_weights.empty()) e.push_back("deep_supervision_weights must not be empty");
    for (double w : deep_supervision_weights) {
        if (w < 0) e.push_back("deep_supervision_weights must be non-negative");
    }
    raise_if(e, "invalid training config");
}

json to_json(const TrainConfig& t) {
    return json{{"steps", t.steps},
                {"batch_size", t.batch_size},
                {"crops_per_volume", t.crops_per_volume},
                {"eval_interval", t.eval_interval},
                {"checkpoint_interval", t.checkpoint_interval},
                {"loss_mode", to_string(t.loss_mode)},
                {"loss_include_background", t.loss_include_background},
                {"deep_supervision_weights", t.deep_supervision_weights},
                {"lr", t.lr},
                {"betas", t.betas},
                {"eps", t.eps},
                {"weight_decay", t.weight_decay},
                {"plateau_factor", t.plateau_factor},
                {"plateau_patience", t.plateau_patience},
                {"foreground_prob", t.foreground_prob},
                {"eval_overlap", t.eval_overlap},
                {"augment", t.augment}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig t;
    ObjectReader r(j, "train");
    r.get("steps", t.steps);
    r.get("batch_size", t.batch_size);
    r.get("crops_per_volume", t.crops_per_volume);
    r.get("eval_interval", t.eval_interval);
    r.get("checkpoint_interval", t.checkpoint_interval);
    r.get("loss_mode", t.loss_mode);
    r.get("loss_include_background", t.loss_include_background);
    r.get("deep_supervision_weights", t.deep_supervision_weights);
    r.get("lr", t.lr);
    r.get("betas", t.betas);
    r.get("eps", t.eps);
    r.get("weight_decay", t.weight_decay);
    r.get("plateau_factor", t.plateau_factor);
    r.get("plateau_patience", t.plateau_patience);
    r.get("foreground_prob", t.foreground_prob);
    r.get("eval_overlap", t.eval_overlap);
    r.get("augment", t.augment);
    r.finish();
    return t;
}

// ---- DataConfig / SynthSpec -------------------------------------------------

void DataConfig::validate() const {
    std::vector<std::string> e;
    if (clip && !((*clip)[0] < (*clip)[1])) e.push_back("clip needs lo < hi");
    if (!(percentiles[0] >= 0 && percentiles[0] < percentiles[1] && percentiles[1] <= 100)) {
        e.push_back("percentiles need 0 <= lo < hi <= 100");
    }
    raise_if(e, "invalid data config");
}

json to_json(const DataConfig& d) {
    return json{{"manifest", d.manifest}, {"clip", opt(d.clip)}, {"percentiles", d.percentiles}};
}

DataConfig data_config_from_json(const json& j) {
    DataConfig d;
    ObjectReader r(j, "data");
    r.get("manifest", d.manifest);
    r.get("clip", d.clip);
    r.get("percentiles", d.percentiles);
    r.finish();
    return d;
}

void SynthSpec::validate() const {
    std::vector<std::string> e;
    if (num_volumes < 1) e.push_back("num_volumes must be >= 1");
    for (size_t a = 0; a < 3; ++a) {
        if (extents[a] < 8) e.push_back("extents must be >= 8 on every axis");
    }
    if (num_classes < 2) e.push_back("num_classes must be >= 2");
    if (shapes_per_volume < 1) e.push_back("shapes_per_volume must be >= 1");
    if (noise_sigma < 0) e.push_back("noise_sigma must be >= 0");
    raise_if(e, "invalid synth spec");
}

json to_json(const SynthSpec& s) {
    return json{{"num_volumes", s.num_volumes},
                {"extents", s.extents},
                {"num_classes", s.num_classes},
                {"shapes_per_volume", s.shapes_per_volume},
                {"noise_sigma", s.noise_sigma}};
}

SynthSpec synth_spec_from_json(const json& j) {
    SynthSpec s;
    ObjectReader r(j, "synth");
    r.get("num_volumes", s.num_volumes);
    r.get("extents", s.extents);
    r.get("num_classes", s.num_classes);
    r.get("shapes_per_volume", s.shapes_per_volume);
    r.get("noise_sigma", s.noise_sigma);
    r.finish();
    return s;
}

// ---- CliConfig --------------------------------------------------------------

void CliConfig::validate() const {
    model.validate();
    train.validate();
    augment.validate();
    data.validate();
    synth.validate();
    if (model.deep_supervision &&
        train.deep_supervision_weights.size() != static_cast<size_t>(1 + model.num_aux_heads())) {
        throw ConfigError("train.deep_supervision_weights needs " +
                          std::to_string(1 + model.num_aux_heads()) + " entries, got " +
                          std::to_string(train.deep_supervision_weights.size()));
    }
}

json to_json(const CliConfig& c) {
    return json{{"seed", c.seed},
                {"deterministic", c.deterministic},
                {"out_dir", c.out_dir},
                {"model", to_json(c.model)},
                {"train", to_json(c.train)},
                {"augment", to_json(c.augment)},
                {"data", to_json(c.data)},
                {"synth", to_json(c.synth)}};
}

CliConfig cli_config_from_json(const json& j) {
    CliConfig c;
    ObjectReader r(j, "config");
    r.get("seed", c.seed);
    r.get("deterministic", c.deterministic);
    r.get("out_dir", c.out_dir);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
    if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
    if (j.contains("synth")) c.synth = synth_spec_from_json(j.at("synth"));
    for (const char* k : {"model", "train", "augment", "data", "synth"}) r.mark(k);
    r.finish();
    return c;
}

CliConfig load_cli_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return cli_config_from_json(j);
}

}  // namespace uxnet
