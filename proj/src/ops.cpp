#include "uxnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace uxnet {

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
    }
}

template <typename T>
T ordered_sum(const T* data, int64_t n) {
    constexpr int64_t kLeaf = 256;
    if (n <= kLeaf) {
        T s = 0;
        for (int64_t i = 0; i < n; ++i) s += data[i];
        return s;
    }
    const int64_t half = n / 2;
    return ordered_sum(data, half) + ordered_sum(data + half, n - half);
}

namespace {

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f) {
    Tensor<T> out(a.shape());
    const T* src = a.data();
    T* dst = out.data();
    for (int64_t i = 0, n = a.numel(); i < n; ++i) dst[i] = f(src[i]);
    return out;
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f) {
    Tensor<T> out(a.shape());
    const T* x = a.data();
    const T* y = b.data();
    T* dst = out.data();
    for (int64_t i = 0, n = a.numel(); i < n; ++i) dst[i] = f(x[i], y[i]);
    return out;
}

bool is_scalar(const Shape& s) { return shape_numel(s) == 1; }

/// Returns `b` broadcast to `a`'s shape when `b` is a scalar and `a` is not.
template <typename T>
Tensor<T> align(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() == b.shape()) return b;
    if (is_scalar(b.shape())) return Tensor<T>(a.shape(), b[0]);
    require_same_shape(a.shape(), b.shape(), op);
    return b;
}

/// Reduces a gradient of the broadcast shape back to the operand shape.
template <typename T>
Tensor<T> unalign(const Tensor<T>& g, const Shape& target) {
    if (g.shape() == target) return g;
    return Tensor<T>(target, ordered_sum(g.data(), g.numel()));
}

template <typename T>
Shape binary_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() == b.shape()) return a.shape();
    if (is_scalar(b.shape())) return a.shape();
    if (is_scalar(a.shape())) return b.shape();
    require_same_shape(a.shape(), b.shape(), op);
    return a.shape();
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    Shape out = binary_shape(a.value(), b.value(), "add");
    Tensor<T> av = a.shape() == out ? a.value() : Tensor<T>(out, a.value()[0]);
    Tensor<T> bv = align(av, b.value(), "add");
    Tensor<T> r = zip(av, bv, [](T x, T y) { return x + y; });
    return make_result<T>("add", std::move(r), {a, b}, [](Node<T>& self) {
        for (auto& in : self.inputs) in->accumulate(unalign(self.grad, in->value().shape()));
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    Shape out = binary_shape(a.value(), b.value(), "sub");
    Tensor<T> av = a.shape() == out ? a.value() : Tensor<T>(out, a.value()[0]);
    Tensor<T> bv = align(av, b.value(), "sub");
    Tensor<T> r = zip(av, bv, [](T x, T y) { return x - y; });
    return make_result<T>("sub", std::move(r), {a, b}, [](Node<T>& self) {
        self.inputs[0]->accumulate(unalign(self.grad, self.inputs[0]->value().shape()));
        if (self.inputs[1]->requires_grad) {
            Tensor<T> neg = map(self.grad, [](T g) { return -g; });
            self.inputs[1]->accumulate(unalign(neg, self.inputs[1]->value().shape()));
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    Shape out = binary_shape(a.value(), b.value(), "mul");
    Tensor<T> av = a.shape() == out ? a.value() : Tensor<T>(out, a.value()[0]);
    Tensor<T> bv = align(av, b.value(), "mul");
    Tensor<T> r = zip(av, bv, [](T x, T y) { return x * y; });
    return make_result<T>("mul", std::move(r), {a, b}, [out](Node<T>& self) {
        const auto& x = self.inputs[0]->value();
        const auto& y = self.inputs[1]->value();
        Tensor<T> xv = x.shape() == out ? x : Tensor<T>(out, x[0]);
        Tensor<T> yv = y.shape() == out ? y : Tensor<T>(out, y[0]);
        if (self.inputs[0]->requires_grad) {
            self.inputs[0]->accumulate(
                unalign(zip(self.grad, yv, [](T g, T v) { return g * v; }), x.shape()));
        }
        if (self.inputs[1]->requires_grad) {
            self.inputs[1]->accumulate(
                unalign(zip(self.grad, xv, [](T g, T v) { return g * v; }), y.shape()));
        }
    });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
    Tensor<T> r = map(a.value(), [s](T x) { return x * s; });
    return make_result<T>("mul_scalar", std::move(r), {a}, [s](Node<T>& self) {
        self.inputs[0]->accumulate(map(self.grad, [s](T g) { return g * s; }));
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> r = map(a.value(), [s](T x) { return x + s; });
    return make_result<T>("add_scalar", std::move(r), {a},
                          [](Node<T>& self) { self.inputs[0]->accumulate(self.grad); });
}

namespace {

struct ReducePlan {
    Shape out_shape;       // with kept dims (extent 1 on reduced axes)
    Shape result_shape;    // as returned
    std::vector<bool> reduced;
    int64_t count = 1;     // elements folded into each output
};

ReducePlan plan_reduce(const Shape& in, std::vector<int> axes, bool keepdims) {
    const int rank = static_cast<int>(in.size());
    ReducePlan p;
    p.reduced.assign(in.size(), axes.empty());
    for (int& ax : axes) {
        int a = ax < 0 ? ax + rank : ax;
        if (a < 0 || a >= rank) {
            throw std::invalid_argument("reduce: axis " + std::to_string(ax) +
                                        " invalid for shape " + shape_str(in));
        }
        if (p.reduced[static_cast<size_t>(a)]) {
            throw std::invalid_argument("reduce: repeated axis " + std::to_string(ax));
        }
        p.reduced[static_cast<size_t>(a)] = true;
    }
    for (int i = 0; i < rank; ++i) {
        if (p.reduced[static_cast<size_t>(i)]) {
            p.out_shape.push_back(1);
            p.count *= in[static_cast<size_t>(i)];
            if (keepdims) p.result_shape.push_back(1);
        } else {
            p.out_shape.push_back(in[static_cast<size_t>(i)]);
            p.result_shape.push_back(in[static_cast<size_t>(i)]);
        }
    }
    return p;
}

/// Calls f(in_index, out_index) for every input element in row-major order.
template <typename F>
void for_each_reduced(const Shape& in, const ReducePlan& p, F f) {
    const size_t rank = in.size();
    std::vector<int64_t> out_stride(rank, 1);
    for (size_t i = rank; i-- > 1;) out_stride[i - 1] = out_stride[i] * p.out_shape[i];
    std::vector<int64_t> idx(rank, 0);
    const int64_t n = shape_numel(in);
    int64_t o = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, o);
        for (size_t ax = rank; ax-- > 0;) {
            if (++idx[ax] < in[ax]) {
                if (!p.reduced[ax]) o += out_stride[ax];
                break;
            }
            if (!p.reduced[ax]) o -= out_stride[ax] * (in[ax] - 1);
            idx[ax] = 0;
        }
    }
}

template <typename T>
Var<T> reduce_impl(const Var<T>& x, std::vector<int> axes, bool keepdims, bool average,
                   const char* op) {
    const Shape in = x.shape();
    ReducePlan p = plan_reduce(in, std::move(axes), keepdims);
    Tensor<T> out(p.out_shape);
    const T* src = x.value().data();
    T* dst = out.data();
    const bool all = std::all_of(p.reduced.begin(), p.reduced.end(), [](bool r) { return r; });
    if (all) {
        dst[0] = ordered_sum(src, x.value().numel());
    } else {
        for_each_reduced(in, p, [&](int64_t i, int64_t o) { dst[o] += src[i]; });
    }
    const T scale = average ? T(1) / static_cast<T>(std::max<int64_t>(1, p.count)) : T(1);
    if (average) {
        for (int64_t i = 0; i < out.numel(); ++i) dst[i] *= scale;
    }
    Tensor<T> result = out.reshaped(p.result_shape);
    return make_result<T>(op, std::move(result), {x}, [p, in, scale](Node<T>& self) {
        Tensor<T> g(in);
        const T* up = self.grad.data();
        T* dg = g.data();
        for_each_reduced(in, p, [&](int64_t i, int64_t o) { dg[i] = up[o] * scale; });
        self.inputs[0]->accumulate(std::move(g));
    });
}

}  // namespace

template <typename T>
Var<T> sum(const Var<T>& x, std::vector<int> axes, bool keepdims) {
    return reduce_impl(x, std::move(axes), keepdims, false, "sum");
}

template <typename T>
Var<T> mean(const Var<T>& x, std::vector<int> axes, bool keepdims) {
    return reduce_impl(x, std::move(axes), keepdims, true, "mean");
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    bool ok = sa.size() == sb.size() && sa.size() >= 2;
    for (size_t i = 0; ok && i < sa.size(); ++i) {
        if (i != 1 && sa[i] != sb[i]) ok = false;
    }
    if (!ok) {
        throw ShapeError("concat_channels: non-channel extents differ " + shape_str(sa) + " vs " +
                         shape_str(sb));
    }
    const int64_t n = sa[0], ca = sa[1], cb = sb[1];
    int64_t vox = 1;
    for (size_t i = 2; i < sa.size(); ++i) vox *= sa[i];
    Shape so = sa;
    so[1] = ca + cb;
    Tensor<T> out(so);
    for (int64_t s = 0; s < n; ++s) {
        std::copy_n(a.value().data() + s * ca * vox, ca * vox, out.data() + s * (ca + cb) * vox);
        std::copy_n(b.value().data() + s * cb * vox, cb * vox,
                    out.data() + (s * (ca + cb) + ca) * vox);
    }
    return make_result<T>("concat_channels", std::move(out), {a, b},
                          [n, ca, cb, vox, sa, sb](Node<T>& self) {
                              const T* g = self.grad.data();
                              if (self.inputs[0]->requires_grad) {
                                  Tensor<T> ga(sa);
                                  for (int64_t s = 0; s < n; ++s) {
                                      std::copy_n(g + s * (ca + cb) * vox, ca * vox,
                                                  ga.data() + s * ca * vox);
                                  }
                                  self.inputs[0]->accumulate(std::move(ga));
                              }
                              if (self.inputs[1]->requires_grad) {
                                  Tensor<T> gb(sb);
                                  for (int64_t s = 0; s < n; ++s) {
                                      std::copy_n(g + (s * (ca + cb) + ca) * vox, cb * vox,
                                                  gb.data() + s * cb * vox);
                                  }
                                  self.inputs[1]->accumulate(std::move(gb));
                              }
                          });
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    if (x.rank() < 2 || x.dim(1) < 1) {
        throw ShapeError("softmax_channels: need a channel axis, got " + shape_str(x.shape()));
    }
    const int64_t n = x.dim(0), c = x.dim(1);
    const int64_t vox = x.numel() / (n * c);
    Tensor<T> out(x.shape());
    for (int64_t s = 0; s < n; ++s) {
        const T* src = x.data() + s * c * vox;
        T* dst = out.data() + s * c * vox;
        for (int64_t v = 0; v < vox; ++v) {
            T m = src[v];
            for (int64_t k = 1; k < c; ++k) m = std::max(m, src[k * vox + v]);
            T z = 0;
            for (int64_t k = 0; k < c; ++k) {
                T e = std::exp(src[k * vox + v] - m);
                dst[k * vox + v] = e;
                z += e;
            }
            const T inv = T(1) / z;
            for (int64_t k = 0; k < c; ++k) dst[k * vox + v] *= inv;
        }
    }
    return out;
}

template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
    Tensor<T> p = softmax_channels(x.value());
    Tensor<T> saved = p;
    return make_result<T>("softmax_channels", std::move(p), {x}, [saved](Node<T>& self) {
        // dx_k = p_k (g_k - sum_j g_j p_j)
        const int64_t n = saved.dim(0), c = saved.dim(1);
        const int64_t vox = saved.numel() / (n * c);
        Tensor<T> gx(saved.shape());
        for (int64_t s = 0; s < n; ++s) {
            const T* p = saved.data() + s * c * vox;
            const T* g = self.grad.data() + s * c * vox;
            T* d = gx.data() + s * c * vox;
            for (int64_t v = 0; v < vox; ++v) {
                T dot = 0;
                for (int64_t k = 0; k < c; ++k) dot += g[k * vox + v] * p[k * vox + v];
                for (int64_t k = 0; k < c; ++k) {
                    d[k * vox + v] = p[k * vox + v] * (g[k * vox + v] - dot);
                }
            }
        }
        self.inputs[0]->accumulate(std::move(gx));
    });
}

#define UXNET_INSTANTIATE_OPS(T)                                                        \
    template T ordered_sum<T>(const T*, int64_t);                                       \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                               \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                               \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                               \
    template Var<T> mul_scalar<T>(const Var<T>&, T);                                    \
    template Var<T> add_scalar<T>(const Var<T>&, T);                                    \
    template Var<T> sum<T>(const Var<T>&, std::vector<int>, bool);                      \
    template Var<T> mean<T>(const Var<T>&, std::vector<int>, bool);                     \
    template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                   \
    template Var<T> softmax_channels<T>(const Var<T>&);                                 \
    template Tensor<T> softmax_channels<T>(const Tensor<T>&);

UXNET_INSTANTIATE_OPS(float)
UXNET_INSTANTIATE_OPS(double)

}  // namespace uxnet
