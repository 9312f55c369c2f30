#include "uxnet/loss.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "uxnet/ops.hpp"

namespace uxnet {

LabelBatch::LabelBatch(Shape s, std::vector<int32_t> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw ShapeError("label batch of " + std::to_string(data.size()) +
                         " values does not match shape " + shape_str(shape));
    }
}

namespace {

struct Dims {
    int64_t n, k, vox;
};

template <typename T>
Dims check_labels(const Tensor<T>& logits, const LabelBatch& labels, const char* op) {
    if (logits.rank() != 5) {
        throw ShapeError(std::string(op) + ": logits must be N,K,H,W,D, got " +
                         shape_str(logits.shape()));
    }
    const Shape expect{logits.dim(0), logits.dim(2), logits.dim(3), logits.dim(4)};
    if (labels.shape != expect) {
        throw ShapeError(std::string(op) + ": labels " + shape_str(labels.shape) +
                         " do not match logits " + shape_str(logits.shape()));
    }
    const int64_t k = logits.dim(1);
    for (int32_t v : labels.data) {
        if (v < 0 || v >= k) {
            throw std::invalid_argument(std::string(op) + ": label " + std::to_string(v) +
                                        " outside [0, " + std::to_string(k) + ")");
        }
    }
    return {logits.dim(0), k, logits.dim(2) * logits.dim(3) * logits.dim(4)};
}

}  // namespace

template <typename T>
Var<T> dice_loss(const Var<T>& logits, const LabelBatch& labels, const DiceOptions& opt) {
    const Dims d = check_labels(logits.value(), labels, "dice_loss");
    Tensor<T> p = softmax_channels(logits.value());
    const int64_t c0 = opt.include_background ? 0 : 1;
    const int64_t classes = d.k - c0;
    if (classes < 1) throw std::invalid_argument("dice_loss: no classes left to score");

    // Per-class sums over batch and voxels, accumulated in double.
    std::vector<double> inter(static_cast<size_t>(d.k), 0.0), psum(inter), ysum(inter);
    for (int64_t s = 0; s < d.n; ++s) {
        const int32_t* y = labels.data.data() + s * d.vox;
        for (int64_t c = c0; c < d.k; ++c) {
            const T* pc = p.data() + (s * d.k + c) * d.vox;
            double i = 0, ps = 0, ys = 0;
            for (int64_t v = 0; v < d.vox; ++v) {
                ps += pc[v];
                if (y[v] == c) {
                    i += pc[v];
                    ys += 1;
                }
            }
            inter[static_cast<size_t>(c)] += i;
            psum[static_cast<size_t>(c)] += ps;
            ysum[static_cast<size_t>(c)] += ys;
        }
    }
    double mean_dice = 0;
    for (int64_t c = c0; c < d.k; ++c) {
        const size_t ci = static_cast<size_t>(c);
        mean_dice += (2 * inter[ci] + opt.smooth) / (psum[ci] + ysum[ci] + opt.smooth);
    }
    mean_dice /= static_cast<double>(classes);
    Tensor<T> loss(Shape{}, static_cast<T>(1.0 - mean_dice));

    return make_result<T>(
        "dice_loss", std::move(loss), {logits},
        [d, c0, classes, opt, labels, p = std::move(p), inter = std::move(inter),
         psum = std::move(psum), ysum = std::move(ysum)](Node<T>& self) {
            const double up = static_cast<double>(self.grad[0]);
            // d loss / d p_c(v) = -(1/classes) * (2 y (S + s) - (2 I + s)) / (S + s)^2
            std::vector<double> a(static_cast<size_t>(d.k), 0.0), b(a);
            for (int64_t c = c0; c < d.k; ++c) {
                const size_t ci = static_cast<size_t>(c);
                const double den = psum[ci] + ysum[ci] + opt.smooth;
                a[ci] = -up / static_cast<double>(classes) * 2.0 / den;
                b[ci] = up / static_cast<double>(classes) * (2 * inter[ci] + opt.smooth) / (den * den);
            }
            Tensor<T> dz(p.shape());
            std::vector<double> g(static_cast<size_t>(d.k));
            for (int64_t s = 0; s < d.n; ++s) {
                const int32_t* y = labels.data.data() + s * d.vox;
                const T* ps = p.data() + s * d.k * d.vox;
                T* out = dz.data() + s * d.k * d.vox;
                for (int64_t v = 0; v < d.vox; ++v) {
                    double dot = 0;
                    for (int64_t c = 0; c < d.k; ++c) {
                        const size_t ci = static_cast<size_t>(c);
                        g[ci] = b[ci] + (y[v] == c ? a[ci] : 0.0);
                        dot += g[ci] * ps[c * d.vox + v];
                    }
                    for (int64_t c = 0; c < d.k; ++c) {
                        const double pc = ps[c * d.vox + v];
                        out[c * d.vox + v] = static_cast<T>(pc * (g[static_cast<size_t>(c)] - dot));
                    }
                }
            }
            self.inputs[0]->accumulate(std::move(dz));
        });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const LabelBatch& labels) {
    const Dims d = check_labels(logits.value(), labels, "cross_entropy");
    Tensor<T> p = softmax_channels(logits.value());
    const double m = static_cast<double>(d.n * d.vox);
    double total = 0;
    for (int64_t s = 0; s < d.n; ++s) {
        for (int64_t v = 0; v < d.vox; ++v) {
            const int32_t y = labels.data[static_cast<size_t>(s * d.vox + v)];
            // log-softmax from the logits keeps the tail finite when p underflows
            const T* z = logits.value().data() + s * d.k * d.vox + v;
            double mx = z[0];
            for (int64_t c = 1; c < d.k; ++c) mx = std::max<double>(mx, z[c * d.vox]);
            double lse = 0;
            for (int64_t c = 0; c < d.k; ++c) lse += std::exp(z[c * d.vox] - mx);
            total += mx + std::log(lse) - z[y * d.vox];
        }
    }
    Tensor<T> loss(Shape{}, static_cast<T>(total / m));
    return make_result<T>("cross_entropy", std::move(loss), {logits},
                          [d, m, labels, p = std::move(p)](Node<T>& self) {
                              const double up = static_cast<double>(self.grad[0]) / m;
                              Tensor<T> dz(p.shape());
                              for (int64_t s = 0; s < d.n; ++s) {
                                  for (int64_t c = 0; c < d.k; ++c) {
                                      const T* pc = p.data() + (s * d.k + c) * d.vox;
                                      const int32_t* y = labels.data.data() + s * d.vox;
                                      T* out = dz.data() + (s * d.k + c) * d.vox;
                                      for (int64_t v = 0; v < d.vox; ++v) {
                                          out[v] = static_cast<T>(
                                              up * (pc[v] - (y[v] == c ? 1.0 : 0.0)));
                                      }
                                  }
                              }
                              self.inputs[0]->accumulate(std::move(dz));
                          });
}

template <typename T>
Var<T> segmentation_loss(const Var<T>& logits, const LabelBatch& labels, LossMode mode,
                         const DiceOptions& opt) {
    Var<T> l = dice_loss(logits, labels, opt);
    if (mode == LossMode::DICE_CE) l = add(l, cross_entropy(logits, labels));
    return l;
}

template <typename T>
Var<T> deep_supervised_loss(const std::vector<Var<T>>& heads, const LabelBatch& labels,
                            const std::vector<double>& weights, LossMode mode,
                            const DiceOptions& opt) {
    if (heads.size() != weights.size()) {
        throw std::invalid_argument("deep_supervised_loss: " + std::to_string(heads.size()) +
                                    " heads but " + std::to_string(weights.size()) + " weights");
    }
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument("deep_supervised_loss: weights sum to " + std::to_string(total) +
                                    ", expected 1");
    }
    Var<T> acc;
    for (size_t i = 0; i < heads.size(); ++i) {
        Var<T> term = mul_scalar(segmentation_loss(heads[i], labels, mode, opt),
                                 static_cast<T>(weights[i]));
        acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
}

std::vector<double> dice_per_class(const std::vector<int32_t>& pred, const std::vector<int32_t>& truth,
                                   int64_t num_classes) {
    if (pred.size() != truth.size()) {
        throw ShapeError("dice_per_class: prediction has " + std::to_string(pred.size()) +
                         " voxels, reference " + std::to_string(truth.size()));
    }
    std::vector<int64_t> inter(static_cast<size_t>(num_classes), 0), a(inter), b(inter);
    for (size_t i = 0; i < pred.size(); ++i) {
        const int32_t p = pred[i], t = truth[i];
        if (p < 0 || p >= num_classes || t < 0 || t >= num_classes) {
            throw std::invalid_argument("dice_per_class: label outside [0, " +
                                        std::to_string(num_classes) + ")");
        }
        ++a[static_cast<size_t>(p)];
        ++b[static_cast<size_t>(t)];
        if (p == t) ++inter[static_cast<size_t>(p)];
    }
    std::vector<double> out(static_cast<size_t>(num_classes));
    for (size_t c = 0; c < out.size(); ++c) {
        const int64_t den = a[c] + b[c];
        out[c] = den == 0 ? 1.0 : 2.0 * static_cast<double>(inter[c]) / static_cast<double>(den);
    }
    return out;
}

double foreground_mean(const std::vector<double>& per_class) {
    if (per_class.size() < 2) return per_class.empty() ? 0.0 : per_class[0];
    double s = 0;
    for (size_t c = 1; c < per_class.size(); ++c) s += per_class[c];
    return s / static_cast<double>(per_class.size() - 1);
}

#define UXNET_INSTANTIATE_LOSS(T)                                                               \
    template Var<T> dice_loss<T>(const Var<T>&, const LabelBatch&, const DiceOptions&);         \
    template Var<T> cross_entropy<T>(const Var<T>&, const LabelBatch&);                         \
    template Var<T> segmentation_loss<T>(const Var<T>&, const LabelBatch&, LossMode,            \
                                         const DiceOptions&);                                   \
    template Var<T> deep_supervised_loss<T>(const std::vector<Var<T>>&, const LabelBatch&,      \
                                            const std::vector<double>&, LossMode,               \
                                            const DiceOptions&);

UXNET_INSTANTIATE_LOSS(float)
UXNET_INSTANTIATE_LOSS(double)

}  // namespace uxnet
