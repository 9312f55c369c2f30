#include "uxnet/model.hpp"

#include <numeric>
#include <stdexcept>

#include "uxnet/ops.hpp"

namespace uxnet {

// ---- ParamStore -------------------------------------------------------------

template <typename T>
Parameter<T>* ParamStore<T>::create(const std::string& name, Shape shape, Init init, Rng& rng,
                                    double stddev) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
    Tensor<T> value(std::move(shape));
    switch (init) {
        case Init::TruncNormal:
            for (auto& v : value.values()) v = static_cast<T>(rng.truncated_normal(stddev));
            break;
        case Init::Zeros: break;
        case Init::Ones: value.fill(T(1)); break;
    }
    index_[name] = params_.size();
    params_.push_back(std::make_unique<Parameter<T>>(name, std::move(value)));
    return params_.back().get();
}

template <typename T>
Parameter<T>* ParamStore<T>::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
}

template <typename T>
std::vector<std::string> ParamStore<T>::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p->name);
    return out;
}

template <typename T>
int64_t ParamStore<T>::total_numel() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

// ---- layers -----------------------------------------------------------------

template <typename T>
ConvLayer<T> ConvLayer<T>::make(ParamStore<T>& store, const std::string& name,
                                const Conv3dSpec& spec, Rng& rng, bool transposed) {
    spec.validate();
    ConvLayer<T> l;
    l.spec = spec;
    l.transposed = transposed;
    using Init = typename ParamStore<T>::Init;
    l.weight = store.create(name + ".weight",
                            transposed ? spec.transposed_weight_shape() : spec.weight_shape(),
                            Init::TruncNormal, rng);
    if (spec.bias) l.bias = store.create(name + ".bias", {spec.out_channels}, Init::Zeros, rng);
    return l;
}

template <typename T>
Var<T> ConvLayer<T>::operator()(const Var<T>& x) const {
    Var<T> w = Var<T>::param(*weight);
    Var<T> b = bias ? Var<T>::param(*bias) : Var<T>();
    return transposed ? conv_transpose3d(x, spec, w, b) : conv3d(x, spec, w, b);
}

template <typename T>
int64_t ConvLayer<T>::param_count() const {
    return weight->value.numel() + (bias ? bias->value.numel() : 0);
}

template <typename T>
NormLayer<T> NormLayer<T>::make(ParamStore<T>& store, const std::string& name,
                                const NormSpec& spec, Rng& rng) {
    spec.validate();
    NormLayer<T> l;
    l.spec = spec;
    using Init = typename ParamStore<T>::Init;
    l.gamma = store.create(name + ".gamma", {spec.num_channels}, Init::Ones, rng);
    l.beta = store.create(name + ".beta", {spec.num_channels}, Init::Zeros, rng);
    return l;
}

template <typename T>
Var<T> NormLayer<T>::operator()(const Var<T>& x) const {
    return normalize(x, spec, Var<T>::param(*gamma), Var<T>::param(*beta));
}

template <typename T>
UXNetBlock<T> UXNetBlock<T>::make(ParamStore<T>& store, const std::string& name, int64_t c,
                                  int64_t k, ScalingMode scaling, ConvMode conv_mode, Rng& rng) {
    UXNetBlock<T> b;
    b.channels = c;
    b.scaling = scaling;
    const int64_t pad = (k - 1) / 2;
    const int64_t dwc_groups = conv_mode == ConvMode::DEPTHWISE ? c : 1;
    b.ln1 = NormLayer<T>::make(store, name + ".ln1", NormSpec::layer_norm(c), rng);
    b.dwc = ConvLayer<T>::make(store, name + ".dwc", Conv3dSpec::cube(c, c, k, 1, pad, dwc_groups),
                               rng);
    if (scaling != ScalingMode::NONE) {
        b.ln2 = NormLayer<T>::make(store, name + ".ln2", NormSpec::layer_norm(c), rng);
        const int64_t groups = scaling == ScalingMode::DCS ? c : 1;
        b.expand = ConvLayer<T>::make(store, name + ".expand",
                                      Conv3dSpec::cube(c, 4 * c, 1, 1, 0, groups), rng);
        b.compress = ConvLayer<T>::make(store, name + ".compress",
                                        Conv3dSpec::cube(4 * c, c, 1, 1, 0, groups), rng);
    }
    return b;
}

template <typename T>
Var<T> UXNetBlock<T>::operator()(const Var<T>& z) const {
    if (z.shape().size() != 5 || z.dim(1) != channels) {
        throw ShapeError("UXNetBlock: expected " + std::to_string(channels) +
                         " channels, got input " + shape_str(z.shape()));
    }
    Var<T> zhat = add(dwc(ln1(z)), z);
    if (scaling == ScalingMode::NONE) return zhat;
    Var<T> h = ln2(zhat);
    if (scaling == ScalingMode::DCS) {
        h = conv3d_depthwise_multiplier(h, 4, Var<T>::param(*expand.weight),
                                        Var<T>::param(*expand.bias));
    } else {
        h = expand(h);
    }
    h = compress(gelu(h));
    return add(h, zhat);
}

template <typename T>
ResUnit<T> ResUnit<T>::make(ParamStore<T>& store, const std::string& name, int64_t in,
                            int64_t out, Rng& rng, bool single_conv) {
    if (single_conv && in != out) {
        throw std::invalid_argument("single-conv residual unit needs equal widths");
    }
    ResUnit<T> u;
    u.single_conv = single_conv;
    u.conv1 = ConvLayer<T>::make(store, name + ".conv1", Conv3dSpec::cube(in, out, 3, 1, 1, 1, false),
                                 rng);
    u.norm1 = NormLayer<T>::make(store, name + ".norm1", NormSpec::instance_norm(out), rng);
    if (!single_conv) {
        u.conv2 = ConvLayer<T>::make(store, name + ".conv2",
                                     Conv3dSpec::cube(out, out, 3, 1, 1, 1, false), rng);
        u.norm2 = NormLayer<T>::make(store, name + ".norm2", NormSpec::instance_norm(out), rng);
        if (in != out) {
            u.proj = ConvLayer<T>::make(store, name + ".proj",
                                        Conv3dSpec::cube(in, out, 1, 1, 0, 1, false), rng);
            u.proj_norm = NormLayer<T>::make(store, name + ".proj_norm",
                                             NormSpec::instance_norm(out), rng);
        }
    }
    return u;
}

template <typename T>
Var<T> ResUnit<T>::operator()(const Var<T>& x) const {
    const T slope = static_cast<T>(kSlope);
    if (single_conv) return leaky_relu(add(norm1(conv1(x)), x), slope);
    Var<T> h = leaky_relu(norm1(conv1(x)), slope);
    h = norm2(conv2(h));
    Var<T> shortcut = proj.weight ? proj_norm(proj(x)) : x;
    return leaky_relu(add(h, shortcut), slope);
}

// ---- UXNetModel -------------------------------------------------------------

template <typename T>
UXNetModel<T>::UXNetModel(const UXNetConfig& config, uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const auto& ch = config_.stage_channels;
    const int64_t pk = config_.effective_patch_kernel();

    patch_embed_ = ConvLayer<T>::make(store_, "encoder.patch_embed",
                                      Conv3dSpec::cube(config_.in_channels, ch[0], pk, 2, (pk - 1) / 2),
                                      rng);
    stages_.resize(4);
    for (size_t s = 0; s < 4; ++s) {
        for (int64_t b = 0; b < config_.stage_depths[s]; ++b) {
            stages_[s].push_back(UXNetBlock<T>::make(
                store_, "encoder.stage" + std::to_string(s) + ".block" + std::to_string(b), ch[s],
                config_.kernel_size, config_.scaling_mode, config_.conv_mode, rng));
        }
        const bool last = s == 3;
        if (last && !config_.has_bottleneck()) break;
        const int64_t next = last ? *config_.bottleneck_channels : ch[s + 1];
        downsample_.push_back(ConvLayer<T>::make(
            store_, "encoder.downsample" + std::to_string(s), Conv3dSpec::cube(ch[s], next, 2, 2, 0),
            rng));
    }
    if (config_.has_bottleneck() && config_.bottleneck_block) {
        const int64_t b = *config_.bottleneck_channels;
        bottleneck_ = std::make_unique<ResUnit<T>>(
            ResUnit<T>::make(store_, "bottleneck", b, b, rng, true));
    }

    input_unit_ = ResUnit<T>::make(store_, "decoder.input", config_.in_channels, ch[0], rng);
    for (size_t s = 0; s < 4; ++s) {
        skip_units_.push_back(
            ResUnit<T>::make(store_, "decoder.skip" + std::to_string(s), ch[s], ch[s], rng));
    }
    // Up path, deepest first. Target widths per level: C4 (1/16, only with a
    // bottleneck), C3, C2, C1 and C1 again at full resolution.
    std::vector<std::pair<int64_t, int64_t>> ups;  // (from, to)
    if (config_.has_bottleneck()) ups.push_back({*config_.bottleneck_channels, ch[3]});
    ups.push_back({ch[3], ch[2]});
    ups.push_back({ch[2], ch[1]});
    ups.push_back({ch[1], ch[0]});
    ups.push_back({ch[0], ch[0]});
    for (size_t i = 0; i < ups.size(); ++i) {
        const auto [from, to] = ups[i];
        const std::string name = "decoder.up" + std::to_string(i);
        up_convs_.push_back(ConvLayer<T>::make(store_, name + ".transp",
                                               Conv3dSpec::cube(from, to, 2, 2, 0, 1, false), rng,
                                               true));
        up_units_.push_back(ResUnit<T>::make(store_, name + ".res", 2 * to, to, rng));
    }
    head_ = ConvLayer<T>::make(store_, "head", Conv3dSpec::cube(ch[0], config_.num_classes, 1), rng);
    if (config_.deep_supervision) {
        const int64_t aux_in[3] = {ch[0], ch[1], ch[2]};
        for (int i = 0; i < 3; ++i) {
            aux_heads_.push_back(ConvLayer<T>::make(
                store_, "aux" + std::to_string(i), Conv3dSpec::cube(aux_in[i], config_.num_classes, 1),
                rng));
        }
    }
}

template <typename T>
void UXNetModel<T>::check_input(const Shape& s) const {
    if (s.size() != 5) throw ShapeError("model input must be N,C,H,W,D, got " + shape_str(s));
    if (s[1] != config_.in_channels) {
        throw ShapeError("model input has " + std::to_string(s[1]) + " channels, config expects " +
                         std::to_string(config_.in_channels));
    }
    const int64_t f = config_.depth_factor();
    for (size_t a = 2; a < 5; ++a) {
        if (s[a] < f || s[a] % f != 0) {
            throw ShapeError("model input " + shape_str(s) + ": spatial extents must be multiples of " +
                             std::to_string(f));
        }
    }
}

template <typename T>
Var<T> UXNetModel<T>::patch_embed(const Var<T>& x) const {
    for (size_t a = 2; a < x.shape().size(); ++a) {
        if (x.shape()[a] % 2 != 0) {
            throw ShapeError("patch_embed: odd spatial extent in " + shape_str(x.shape()));
        }
    }
    return patch_embed_(x);
}

template <typename T>
Var<T> UXNetModel<T>::downsample(const Var<T>& x, int stage) const {
    if (stage < 0 || stage >= static_cast<int>(downsample_.size())) {
        throw std::out_of_range("downsample: no layer after stage " + std::to_string(stage));
    }
    for (size_t a = 2; a < x.shape().size(); ++a) {
        if (x.shape()[a] % 2 != 0) {
            throw ShapeError("downsample: odd spatial extent in " + shape_str(x.shape()));
        }
    }
    return downsample_[static_cast<size_t>(stage)](x);
}

template <typename T>
EncoderFeatures<T> UXNetModel<T>::encode(const Var<T>& x) const {
    check_input(x.shape());
    EncoderFeatures<T> f;
    Var<T> z = patch_embed(x);
    for (size_t s = 0; s < 4; ++s) {
        for (const auto& block : stages_[s]) z = block(z);
        f.stages.push_back(z);
        if (s < downsample_.size()) z = downsample(z, static_cast<int>(s));
    }
    if (config_.has_bottleneck()) f.bottleneck = bottleneck_ ? (*bottleneck_)(z) : z;
    return f;
}

template <typename T>
ModelOutput<T> UXNetModel<T>::forward(const Var<T>& x) const {
    EncoderFeatures<T> enc = encode(x);
    std::vector<Var<T>> skips;
    for (size_t s = 0; s < 4; ++s) skips.push_back(skip_units_[s](enc.stages[s]));
    skips.insert(skips.begin(), input_unit_(x));  // index 0: full resolution

    // Partners for each up step, deepest first.
    Var<T> d;
    size_t next_skip;
    if (config_.has_bottleneck()) {
        d = enc.bottleneck;
        next_skip = 4;
    } else {
        d = skips[4];
        next_skip = 3;
    }
    std::vector<Var<T>> levels;  // decoder outputs, deepest first
    for (size_t i = 0; i < up_convs_.size(); ++i, --next_skip) {
        d = up_units_[i](concat_channels(up_convs_[i](d), skips[next_skip]));
        levels.push_back(d);
    }
    ModelOutput<T> out;
    out.logits = head_(d);
    if (config_.deep_supervision) {
        // levels ends with full, 1/2, 1/4, 1/8 counted from the back.
        const size_t n = levels.size();
        for (int i = 0; i < 3; ++i) {
            const Var<T>& level = levels[n - 2 - static_cast<size_t>(i)];
            out.aux.push_back(upsample_nearest(aux_heads_[static_cast<size_t>(i)](level),
                                               int64_t{2} << i));
        }
    }
    return out;
}

std::vector<double> normalized_weights(const std::vector<double>& w) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0)) throw std::invalid_argument("deep-supervision weights must have a positive sum");
    std::vector<double> out(w);
    for (double& v : out) v /= total;
    return out;
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct ConvLayer<float>;
template struct ConvLayer<double>;
template struct NormLayer<float>;
template struct NormLayer<double>;
template struct UXNetBlock<float>;
template struct UXNetBlock<double>;
template struct ResUnit<float>;
template struct ResUnit<double>;
template class UXNetModel<float>;
template class UXNetModel<double>;

}  // namespace uxnet
