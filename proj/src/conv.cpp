#include "uxnet/conv.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "uxnet/ops.hpp"
#include "uxnet/parallel.hpp"

namespace uxnet {

void Conv3dSpec::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("Conv3dSpec: " + what); };
    if (in_channels < 1 || out_channels < 1) fail("channel counts must be positive");
    if (groups < 1) fail("groups must be positive");
    if (in_channels % groups != 0) {
        fail("in_channels " + std::to_string(in_channels) + " not divisible by groups " +
             std::to_string(groups));
    }
    if (out_channels % groups != 0) {
        fail("out_channels " + std::to_string(out_channels) + " not divisible by groups " +
             std::to_string(groups));
    }
    for (int a = 0; a < 3; ++a) {
        if (kernel[a] < 1) fail("kernel extents must be positive");
        if (stride[a] < 1) fail("strides must be positive");
        if (padding[a] < 0) fail("padding must be non-negative");
    }
}

bool Conv3dSpec::pointwise() const {
    for (int a = 0; a < 3; ++a) {
        if (kernel[a] != 1 || stride[a] != 1 || padding[a] != 0) return false;
    }
    return true;
}

Shape Conv3dSpec::weight_shape() const {
    return {out_channels, in_channels / groups, kernel[0], kernel[1], kernel[2]};
}

Shape Conv3dSpec::transposed_weight_shape() const {
    return {in_channels, out_channels / groups, kernel[0], kernel[1], kernel[2]};
}

int64_t Conv3dSpec::output_extent(int axis, int64_t in) const {
    const int64_t span = in + 2 * padding[axis] - kernel[axis];
    const int64_t out = span < 0 ? 0 : span / stride[axis] + 1;
    if (out < 1) {
        throw std::invalid_argument("conv3d: non-positive output extent on axis " +
                                    std::to_string(axis) + " (input " + std::to_string(in) +
                                    ", kernel " + std::to_string(kernel[axis]) + ", padding " +
                                    std::to_string(padding[axis]) + ")");
    }
    return out;
}

Shape Conv3dSpec::output_shape(const Shape& input) const {
    if (input.size() != 5) throw ShapeError("conv3d expects N,C,H,W,D input, got " + shape_str(input));
    if (input[1] != in_channels) {
        throw ShapeError("conv3d: input has " + std::to_string(input[1]) + " channels, spec expects " +
                         std::to_string(in_channels));
    }
    return {input[0], out_channels, output_extent(0, input[2]), output_extent(1, input[3]),
            output_extent(2, input[4])};
}

Shape Conv3dSpec::transposed_output_shape(const Shape& input) const {
    if (input.size() != 5) {
        throw ShapeError("conv_transpose3d expects N,C,H,W,D input, got " + shape_str(input));
    }
    if (input[1] != in_channels) {
        throw ShapeError("conv_transpose3d: input has " + std::to_string(input[1]) +
                         " channels, spec expects " + std::to_string(in_channels));
    }
    Shape out{input[0], out_channels, 0, 0, 0};
    for (int a = 0; a < 3; ++a) {
        out[static_cast<size_t>(a + 2)] =
            (input[static_cast<size_t>(a + 2)] - 1) * stride[a] - 2 * padding[a] + kernel[a];
        if (out[static_cast<size_t>(a + 2)] < 1) {
            throw std::invalid_argument("conv_transpose3d: non-positive output extent on axis " +
                                        std::to_string(a));
        }
    }
    return out;
}

uint64_t& conv_mac_counter() {
    thread_local uint64_t count = 0;
    return count;
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

struct Geometry {
    int64_t n, cin, ih, iw, id;
    int64_t cout, oh, ow, od;
    int64_t kh, kw, kd, sh, sw, sd, ph, pw, pd;
    int64_t groups, cin_g, cout_g, kvol, krows, in_vox, out_vox;
};

Geometry make_geometry(const Shape& in, const Shape& out, const Conv3dSpec& s) {
    Geometry g{};
    g.n = in[0];
    g.cin = in[1];
    g.ih = in[2];
    g.iw = in[3];
    g.id = in[4];
    g.cout = out[1];
    g.oh = out[2];
    g.ow = out[3];
    g.od = out[4];
    g.kh = s.kernel[0];
    g.kw = s.kernel[1];
    g.kd = s.kernel[2];
    g.sh = s.stride[0];
    g.sw = s.stride[1];
    g.sd = s.stride[2];
    g.ph = s.padding[0];
    g.pw = s.padding[1];
    g.pd = s.padding[2];
    g.groups = s.groups;
    g.cin_g = g.cin / g.groups;
    g.cout_g = g.cout / g.groups;
    g.kvol = g.kh * g.kw * g.kd;
    g.krows = g.cin_g * g.kvol;
    g.in_vox = g.ih * g.iw * g.id;
    g.out_vox = g.oh * g.ow * g.od;
    return g;
}

void check_weight(const Shape& w, const Conv3dSpec& spec) {
    if (w != spec.weight_shape()) {
        throw ShapeError("conv3d: weight shape " + shape_str(w) + " does not match expected " +
                         shape_str(spec.weight_shape()));
    }
}

/// Output rows per im2col slab, keeping the column buffer near 4M elements.
int64_t slab_rows(const Geometry& g) {
    const int64_t per_row = std::max<int64_t>(1, g.krows * g.ow * g.od);
    return std::clamp<int64_t>((int64_t{1} << 22) / per_row, 1, g.oh);
}

/// Valid od range for tap kd along a stride-1 depth axis.
inline void depth_range(const Geometry& g, int64_t kd, int64_t& lo, int64_t& hi) {
    lo = std::max<int64_t>(0, g.pd - kd);
    hi = std::min<int64_t>(g.od, g.id + g.pd - kd);
    if (hi < lo) hi = lo;
}

/// col[r, v] with r = (ci, kh, kw, kd) and v over output rows [oh0, oh1).
template <typename T>
void im2col(const T* xg, const Geometry& g, int64_t oh0, int64_t oh1, T* col) {
    const int64_t cols = (oh1 - oh0) * g.ow * g.od;
    for (int64_t ci = 0; ci < g.cin_g; ++ci) {
        const T* xc = xg + ci * g.in_vox;
        for (int64_t kh = 0; kh < g.kh; ++kh) {
            for (int64_t kw = 0; kw < g.kw; ++kw) {
                for (int64_t kd = 0; kd < g.kd; ++kd) {
                    const int64_t r = ((ci * g.kh + kh) * g.kw + kw) * g.kd + kd;
                    T* dst = col + r * cols;
                    for (int64_t oh = oh0; oh < oh1; ++oh) {
                        const int64_t ih = oh * g.sh - g.ph + kh;
                        for (int64_t ow = 0; ow < g.ow; ++ow) {
                            T* d = dst + ((oh - oh0) * g.ow + ow) * g.od;
                            const int64_t iw = ow * g.sw - g.pw + kw;
                            if (ih < 0 || ih >= g.ih || iw < 0 || iw >= g.iw) {
                                std::fill_n(d, g.od, T(0));
                                continue;
                            }
                            const T* src = xc + (ih * g.iw + iw) * g.id;
                            if (g.sd == 1) {
                                int64_t lo, hi;
                                depth_range(g, kd, lo, hi);
                                std::fill_n(d, lo, T(0));
                                std::copy(src + lo + kd - g.pd, src + hi + kd - g.pd, d + lo);
                                std::fill(d + hi, d + g.od, T(0));
                            } else {
                                for (int64_t od = 0; od < g.od; ++od) {
                                    const int64_t id = od * g.sd - g.pd + kd;
                                    d[od] = (id >= 0 && id < g.id) ? src[id] : T(0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back into the input gradient.
template <typename T>
void col2im(const T* col, const Geometry& g, int64_t oh0, int64_t oh1, T* dxg) {
    const int64_t cols = (oh1 - oh0) * g.ow * g.od;
    parallel_for(g.cin_g, 1, [&](int64_t c0, int64_t c1) {
        for (int64_t ci = c0; ci < c1; ++ci) {
            T* xc = dxg + ci * g.in_vox;
            for (int64_t kh = 0; kh < g.kh; ++kh) {
                for (int64_t kw = 0; kw < g.kw; ++kw) {
                    for (int64_t kd = 0; kd < g.kd; ++kd) {
                        const int64_t r = ((ci * g.kh + kh) * g.kw + kw) * g.kd + kd;
                        const T* src = col + r * cols;
                        for (int64_t oh = oh0; oh < oh1; ++oh) {
                            const int64_t ih = oh * g.sh - g.ph + kh;
                            if (ih < 0 || ih >= g.ih) continue;
                            for (int64_t ow = 0; ow < g.ow; ++ow) {
                                const int64_t iw = ow * g.sw - g.pw + kw;
                                if (iw < 0 || iw >= g.iw) continue;
                                const T* s = src + ((oh - oh0) * g.ow + ow) * g.od;
                                T* d = xc + (ih * g.iw + iw) * g.id;
                                if (g.sd == 1) {
                                    int64_t lo, hi;
                                    depth_range(g, kd, lo, hi);
                                    T* dd = d + kd - g.pd;
                                    for (int64_t od = lo; od < hi; ++od) dd[od] += s[od];
                                } else {
                                    for (int64_t od = 0; od < g.od; ++od) {
                                        const int64_t id = od * g.sd - g.pd + kd;
                                        if (id >= 0 && id < g.id) d[id] += s[od];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

bool use_depthwise_direct(const Conv3dSpec& s) {
    return s.depthwise() && s.stride[0] == 1 && s.stride[1] == 1 && s.stride[2] == 1;
}

/// Visits every (tap, output row) pair of a stride-1 depthwise plane.
/// f(weight_index, out_row_offset, in_row_offset_shifted, lo, hi)
template <typename F>
void depthwise_taps(const Geometry& g, F f) {
    for (int64_t kh = 0; kh < g.kh; ++kh) {
        for (int64_t kw = 0; kw < g.kw; ++kw) {
            for (int64_t kd = 0; kd < g.kd; ++kd) {
                const int64_t widx = (kh * g.kw + kw) * g.kd + kd;
                int64_t lo, hi;
                depth_range(g, kd, lo, hi);
                for (int64_t oh = 0; oh < g.oh; ++oh) {
                    const int64_t ih = oh - g.ph + kh;
                    if (ih < 0 || ih >= g.ih) continue;
                    for (int64_t ow = 0; ow < g.ow; ++ow) {
                        const int64_t iw = ow - g.pw + kw;
                        if (iw < 0 || iw >= g.iw) continue;
                        f(widx, (oh * g.ow + ow) * g.od, (ih * g.iw + iw) * g.id + kd - g.pd, lo, hi);
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         const Conv3dSpec& spec) {
    spec.validate();
    check_weight(weight.shape(), spec);
    Tensor<T> y(spec.output_shape(x.shape()));
    const Geometry g = make_geometry(x.shape(), y.shape(), spec);
    if (bias && bias->numel() != g.cout) {
        throw ShapeError("conv3d: bias shape " + shape_str(bias->shape()) + " for " +
                         std::to_string(g.cout) + " output channels");
    }
    conv_mac_counter() += static_cast<uint64_t>(g.n * g.out_vox * g.cout * g.krows);

    if (use_depthwise_direct(spec)) {
        parallel_for(g.n * g.cout, 1, [&](int64_t p0, int64_t p1) {
            for (int64_t p = p0; p < p1; ++p) {
                const int64_t c = p % g.cout;
                const T* xp = x.data() + p * g.in_vox;
                const T* w = weight.data() + c * g.kvol;
                T* yp = y.data() + p * g.out_vox;
                depthwise_taps(g, [&](int64_t wi, int64_t yo, int64_t xo, int64_t lo, int64_t hi) {
                    const T wv = w[wi];
                    T* yr = yp + yo;
                    const T* xr = xp + xo;
                    for (int64_t od = lo; od < hi; ++od) yr[od] += wv * xr[od];
                });
            }
        });
    } else if (spec.pointwise()) {
        for (int64_t n = 0; n < g.n; ++n) {
            for (int64_t gr = 0; gr < g.groups; ++gr) {
                CMapMat<T> w(weight.data() + gr * g.cout_g * g.krows, g.cout_g, g.krows,
                             Eigen::OuterStride<>(g.krows));
                CMapMat<T> xm(x.data() + (n * g.cin + gr * g.cin_g) * g.in_vox, g.cin_g, g.in_vox,
                              Eigen::OuterStride<>(g.in_vox));
                MapMat<T> ym(y.data() + (n * g.cout + gr * g.cout_g) * g.out_vox, g.cout_g,
                             g.out_vox, Eigen::OuterStride<>(g.out_vox));
                ym.noalias() = w * xm;
            }
        }
    } else {
        const int64_t rows = slab_rows(g);
        std::vector<T> col(static_cast<size_t>(g.krows * rows * g.ow * g.od));
        for (int64_t n = 0; n < g.n; ++n) {
            for (int64_t gr = 0; gr < g.groups; ++gr) {
                const T* xg = x.data() + (n * g.cin + gr * g.cin_g) * g.in_vox;
                CMapMat<T> w(weight.data() + gr * g.cout_g * g.krows, g.cout_g, g.krows,
                             Eigen::OuterStride<>(g.krows));
                for (int64_t oh0 = 0; oh0 < g.oh; oh0 += rows) {
                    const int64_t oh1 = std::min(g.oh, oh0 + rows);
                    const int64_t cols = (oh1 - oh0) * g.ow * g.od;
                    im2col(xg, g, oh0, oh1, col.data());
                    CMapMat<T> cm(col.data(), g.krows, cols, Eigen::OuterStride<>(cols));
                    MapMat<T> ym(y.data() + (n * g.cout + gr * g.cout_g) * g.out_vox +
                                     oh0 * g.ow * g.od,
                                 g.cout_g, cols, Eigen::OuterStride<>(g.out_vox));
                    ym.noalias() = w * cm;
                }
            }
        }
    }

    if (bias) {
        for (int64_t n = 0; n < g.n; ++n) {
            for (int64_t c = 0; c < g.cout; ++c) {
                T* yp = y.data() + (n * g.cout + c) * g.out_vox;
                const T b = (*bias)[c];
                for (int64_t v = 0; v < g.out_vox; ++v) yp[v] += b;
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> conv3d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& weight,
                                const Conv3dSpec& spec, const Shape& input_shape) {
    spec.validate();
    check_weight(weight.shape(), spec);
    const Shape expect = spec.output_shape(input_shape);
    require_same_shape(expect, grad_out.shape(), "conv3d backward");
    Tensor<T> dx(input_shape);
    const Geometry g = make_geometry(input_shape, grad_out.shape(), spec);

    if (use_depthwise_direct(spec)) {
        parallel_for(g.n * g.cout, 1, [&](int64_t p0, int64_t p1) {
            for (int64_t p = p0; p < p1; ++p) {
                const int64_t c = p % g.cout;
                const T* dyp = grad_out.data() + p * g.out_vox;
                const T* w = weight.data() + c * g.kvol;
                T* dxp = dx.data() + p * g.in_vox;
                depthwise_taps(g, [&](int64_t wi, int64_t yo, int64_t xo, int64_t lo, int64_t hi) {
                    const T wv = w[wi];
                    const T* dyr = dyp + yo;
                    T* dxr = dxp + xo;
                    for (int64_t od = lo; od < hi; ++od) dxr[od] += wv * dyr[od];
                });
            }
        });
    } else if (spec.pointwise()) {
        for (int64_t n = 0; n < g.n; ++n) {
            for (int64_t gr = 0; gr < g.groups; ++gr) {
                CMapMat<T> w(weight.data() + gr * g.cout_g * g.krows, g.cout_g, g.krows,
                             Eigen::OuterStride<>(g.krows));
                CMapMat<T> dy(grad_out.data() + (n * g.cout + gr * g.cout_g) * g.out_vox, g.cout_g,
                              g.out_vox, Eigen::OuterStride<>(g.out_vox));
                MapMat<T> dxm(dx.data() + (n * g.cin + gr * g.cin_g) * g.in_vox, g.cin_g, g.in_vox,
                              Eigen::OuterStride<>(g.in_vox));
                dxm.noalias() = w.transpose() * dy;
            }
        }
    } else {
        const int64_t rows = slab_rows(g);
        std::vector<T> col(static_cast<size_t>(g.krows * rows * g.ow * g.od));
        for (int64_t n = 0; n < g.n; ++n) {
            for (int64_t gr = 0; gr < g.groups; ++gr) {
                T* dxg = dx.data() + (n * g.cin + gr * g.cin_g) * g.in_vox;
                CMapMat<T> w(weight.data() + gr * g.cout_g * g.krows, g.cout_g, g.krows,
                             Eigen::OuterStride<>(g.krows));
                for (int64_t oh0 = 0; oh0 < g.oh; oh0 += rows) {
                    const int64_t oh1 = std::min(g.oh, oh0 + rows);
                    const int64_t cols = (oh1 - oh0) * g.ow * g.od;
                    CMapMat<T> dy(grad_out.data() + (n * g.cout + gr * g.cout_g) * g.out_vox +
                                      oh0 * g.ow * g.od,
                                  g.cout_g, cols, Eigen::OuterStride<>(g.out_vox));
                    MapMat<T> cm(col.data(), g.krows, cols, Eigen::OuterStride<>(cols));
                    cm.noalias() = w.transpose() * dy;
                    col2im(col.data(), g, oh0, oh1, dxg);
                }
            }
        }
    }
    return dx;
}

template <typename T>
Tensor<T> conv3d_backward_weight(const Tensor<T>& grad_out, const Tensor<T>& x,
                                 const Conv3dSpec& spec) {
    spec.validate();
    require_same_shape(spec.output_shape(x.shape()), grad_out.shape(), "conv3d backward");
    Tensor<T> dw(spec.weight_shape());
    const Geometry g = make_geometry(x.shape(), grad_out.shape(), spec);

    if (use_depthwise_direct(spec)) {
        parallel_for(g.cout, 1, [&](int64_t c0, int64_t c1) {
            for (int64_t c = c0; c < c1; ++c) {
                T* w = dw.data() + c * g.kvol;
                for (int64_t n = 0; n < g.n; ++n) {
                    const T* dyp = grad_out.data() + (n * g.cout + c) * g.out_vox;
                    const T* xp = x.data() + (n * g.cin + c) * g.in_vox;
                    depthwise_taps(g, [&](int64_t wi, int64_t yo, int64_t xo, int64_t lo,
                                          int64_t hi) {
                        const T* dyr = dyp + yo;
                        const T* xr = xp + xo;
                        T acc = 0;
                        for (int64_t od = lo; od < hi; ++od) acc += dyr[od] * xr[od];
                        w[wi] += acc;
                    });
                }
            }
        });
    } else if (spec.pointwise()) {
        for (int64_t n = 0; n < g.n; ++n) {
            for (int64_t gr = 0; gr < g.groups; ++gr) {
                CMapMat<T> dy(grad_out.data() + (n * g.cout + gr * g.cout_g) * g.out_vox, g.cout_g,
                              g.out_vox, Eigen::OuterStride<>(g.out_vox));
                CMapMat<T> xm(x.data() + (n * g.cin + gr * g.cin_g) * g.in_vox, g.cin_g, g.in_vox,
                              Eigen::OuterStride<>(g.in_vox));
                MapMat<T> w(dw.data() + gr * g.cout_g * g.krows, g.cout_g, g.krows,
                            Eigen::OuterStride<>(g.krows));
                w.noalias() += dy * xm.transpose();
            }
        }
    } else {
        const int64_t rows = slab_rows(g);
        std::vector<T> col(static_cast<size_t>(g.krows * rows * g.ow * g.od));
        for (int64_t n = 0; n < g.n; ++n) {
            for (int64_t gr = 0; gr < g.groups; ++gr) {
                const T* xg = x.data() + (n * g.cin + gr * g.cin_g) * g.in_vox;
                MapMat<T> w(dw.data() + gr * g.cout_g * g.krows, g.cout_g, g.krows,
                            Eigen::OuterStride<>(g.krows));
                for (int64_t oh0 = 0; oh0 < g.oh; oh0 += rows) {
                    const int64_t oh1 = std::min(g.oh, oh0 + rows);
                    const int64_t cols = (oh1 - oh0) * g.ow * g.od;
                    im2col(xg, g, oh0, oh1, col.data());
                    CMapMat<T> cm(col.data(), g.krows, cols, Eigen::OuterStride<>(cols));
                    CMapMat<T> dy(grad_out.data() + (n * g.cout + gr * g.cout_g) * g.out_vox +
                                      oh0 * g.ow * g.od,
                                  g.cout_g, cols, Eigen::OuterStride<>(g.out_vox));
                    w.noalias() += dy * cm.transpose();
                }
            }
        }
    }
    return dw;
}

template <typename T>
Tensor<T> conv3d_backward_bias(const Tensor<T>& grad_out) {
    const int64_t n = grad_out.dim(0), c = grad_out.dim(1);
    const int64_t vox = grad_out.numel() / std::max<int64_t>(1, n * c);
    Tensor<T> db({c});
    for (int64_t s = 0; s < n; ++s) {
        for (int64_t k = 0; k < c; ++k) {
            db[k] += ordered_sum(grad_out.data() + (s * c + k) * vox, vox);
        }
    }
    return db;
}

#define UXNET_INSTANTIATE_CONV(T)                                                          \
    template Tensor<T> conv3d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, \
                                         const Conv3dSpec&);                               \
    template Tensor<T> conv3d_backward_input<T>(const Tensor<T>&, const Tensor<T>&,         \
                                                const Conv3dSpec&, const Shape&);           \
    template Tensor<T> conv3d_backward_weight<T>(const Tensor<T>&, const Tensor<T>&,        \
                                                 const Conv3dSpec&);                        \
    template Tensor<T> conv3d_backward_bias<T>(const Tensor<T>&);

UXNET_INSTANTIATE_CONV(float)
UXNET_INSTANTIATE_CONV(double)

}  // namespace uxnet
