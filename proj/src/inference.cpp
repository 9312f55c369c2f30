#include "uxnet/inference.hpp"

#include <cmath>

#include "uxnet/ops.hpp"

namespace uxnet {

template <typename T>
LabelVolume ProbabilityMap<T>::argmax() const {
    const int64_t k = probs.dim(0);
    const Extents e{probs.dim(1), probs.dim(2), probs.dim(3)};
    const int64_t n = extents_numel(e);
    LabelVolume out(e, k, 0);
    for (int64_t v = 0; v < n; ++v) {
        int32_t best = 0;
        T best_p = probs[v];
        for (int64_t c = 1; c < k; ++c) {
            const T p = probs[c * n + v];
            if (p > best_p) {
                best_p = p;
                best = static_cast<int32_t>(c);
            }
        }
        out.data[static_cast<size_t>(v)] = best;
    }
    return out;
}

std::vector<int64_t> window_starts(int64_t extent, int64_t patch, double overlap) {
    if (!(overlap >= 0.0 && overlap < 1.0)) {
        throw std::invalid_argument("sliding window overlap must be in [0, 1), got " + std::to_string(overlap));
    }
    if (extent <= patch) return {0};
    const int64_t stride = std::max<int64_t>(1, static_cast<int64_t>(std::floor(static_cast<double>(patch) * (1.0 - overlap))));
    std::vector<int64_t> starts;
    for (int64_t s = 0; s + patch < extent; s += stride) starts.push_back(s);
    starts.push_back(extent - patch);
    return starts;
}

template <typename T>
ProbabilityMap<T> sliding_window_infer(const UXNetModel<T>& model, const Volume& v, const Extents& patch,
                                       double overlap) {
    const UXNetConfig& cfg = model.config();
    if (cfg.in_channels != 1) throw std::invalid_argument("sliding_window_infer: model must take one input channel");
    model.check_input({1, 1, patch[0], patch[1], patch[2]});
    const Extents& e = v.extents;
    Extents padded;
    for (size_t a = 0; a < 3; ++a) padded[a] = std::max(e[a], patch[a]);
    std::array<std::vector<int64_t>, 3> starts;
    for (size_t a = 0; a < 3; ++a) starts[a] = window_starts(padded[a], patch[a], overlap);

    const int64_t k = cfg.num_classes;
    const int64_t pn = extents_numel(patch);
    const int64_t n = extents_numel(padded);
    std::vector<double> acc(static_cast<size_t>(k * n), 0.0);
    std::vector<int32_t> hits(static_cast<size_t>(n), 0);

    NoGradScope<T> off;
    Tensor<T> tile(Shape{1, 1, patch[0], patch[1], patch[2]});
    for (int64_t s0 : starts[0]) {
        for (int64_t s1 : starts[1]) {
            for (int64_t s2 : starts[2]) {
                // Copy the window, reading zeros beyond the unpadded volume.
                for (int64_t i = 0; i < patch[0]; ++i) {
                    for (int64_t j = 0; j < patch[1]; ++j) {
                        for (int64_t q = 0; q < patch[2]; ++q) {
                            const int64_t a = s0 + i, b = s1 + j, c = s2 + q;
                            const bool in = a < e[0] && b < e[1] && c < e[2];
                            tile[(i * patch[1] + j) * patch[2] + q] = in ? static_cast<T>(v.at(a, b, c)) : T(0);
                        }
                    }
                }
                const Tensor<T> p = softmax_channels(model.forward(Var<T>::constant(tile)).logits.value());
                for (int64_t i = 0; i < patch[0]; ++i) {
                    for (int64_t j = 0; j < patch[1]; ++j) {
                        for (int64_t q = 0; q < patch[2]; ++q) {
                            const int64_t local = (i * patch[1] + j) * patch[2] + q;
                            const int64_t global = ((s0 + i) * padded[1] + s1 + j) * padded[2] + s2 + q;
                            ++hits[static_cast<size_t>(global)];
                            for (int64_t c = 0; c < k; ++c) acc[static_cast<size_t>(c * n + global)] += p[c * pn + local];
                        }
                    }
                }
            }
        }
    }

    ProbabilityMap<T> out{Tensor<T>(Shape{k, e[0], e[1], e[2]})};
    const int64_t on = extents_numel(e);
    for (int64_t c = 0; c < k; ++c) {
        for (int64_t i = 0; i < e[0]; ++i) {
            for (int64_t j = 0; j < e[1]; ++j) {
                for (int64_t q = 0; q < e[2]; ++q) {
                    const int64_t g = (i * padded[1] + j) * padded[2] + q;
                    out.probs[c * on + (i * e[1] + j) * e[2] + q] =
                        static_cast<T>(acc[static_cast<size_t>(c * n + g)] / hits[static_cast<size_t>(g)]);
                }
            }
        }
    }
    return out;
}

#define UXNET_INSTANTIATE_INFERENCE(T)                                                                    \
    template struct ProbabilityMap<T>;                                                                    \
    template ProbabilityMap<T> sliding_window_infer<T>(const UXNetModel<T>&, const Volume&, const Extents&, \
                                                       double);

UXNET_INSTANTIATE_INFERENCE(float)
UXNET_INSTANTIATE_INFERENCE(double)

}  // namespace uxnet
