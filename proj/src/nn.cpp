#include "uxnet/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "uxnet/ops.hpp"
#include "uxnet/parallel.hpp"

namespace uxnet {

namespace {

template <typename T>
void check_param_shape(const Var<T>& v, const Shape& expect, const char* what) {
    if (v.shape() != expect) {
        throw ShapeError(std::string(what) + ": expected shape " + shape_str(expect) + ", got " +
                         shape_str(v.shape()));
    }
}

template <typename T>
std::vector<Var<T>> conv_inputs(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    std::vector<Var<T>> in{x, w};
    if (b.defined()) in.push_back(b);
    return in;
}

/// (N, C, voxels) view of a rank-5 tensor.
struct Layout {
    int64_t n, c, vox;
};

Layout layout_of(const Shape& s, const char* op) {
    if (s.size() != 5) throw ShapeError(std::string(op) + " expects N,C,H,W,D, got " + shape_str(s));
    return {s[0], s[1], s[2] * s[3] * s[4]};
}

}  // namespace

template <typename T>
Var<T> conv3d(const Var<T>& x, const Conv3dSpec& spec, const Var<T>& weight, const Var<T>& bias) {
    spec.validate();
    check_param_shape(weight, spec.weight_shape(), "conv3d weight");
    if (bias.defined()) check_param_shape(bias, {spec.out_channels}, "conv3d bias");
    Tensor<T> y = conv3d_forward(x.value(), weight.value(), bias.defined() ? &bias.value() : nullptr,
                                 spec);
    return make_result<T>("conv3d", std::move(y), conv_inputs(x, weight, bias),
                          [spec](Node<T>& self) {
                              Node<T>& xn = *self.inputs[0];
                              Node<T>& wn = *self.inputs[1];
                              if (xn.requires_grad) {
                                  xn.accumulate(conv3d_backward_input(self.grad, wn.value(), spec,
                                                                      xn.value().shape()));
                              }
                              if (wn.requires_grad) {
                                  wn.accumulate(conv3d_backward_weight(self.grad, xn.value(), spec));
                              }
                              if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                                  self.inputs[2]->accumulate(conv3d_backward_bias(self.grad));
                              }
                          });
}

template <typename T>
Var<T> conv3d_depthwise_multiplier(const Var<T>& x, int64_t multiplier, const Var<T>& weight,
                                   const Var<T>& bias) {
    if (multiplier < 1) throw std::invalid_argument("depthwise multiplier must be positive");
    if (x.shape().size() != 5) {
        throw ShapeError("depthwise multiplier expects N,C,H,W,D, got " + shape_str(x.shape()));
    }
    const int64_t c = x.dim(1);
    Conv3dSpec spec = Conv3dSpec::cube(c, c * multiplier, 1, 1, 0, c, bias.defined());
    return conv3d(x, spec, weight, bias);
}

template <typename T>
Var<T> conv_transpose3d(const Var<T>& x, const Conv3dSpec& spec, const Var<T>& weight,
                        const Var<T>& bias) {
    spec.validate();
    check_param_shape(weight, spec.transposed_weight_shape(), "conv_transpose3d weight");
    if (bias.defined()) check_param_shape(bias, {spec.out_channels}, "conv_transpose3d bias");
    const Shape out_shape = spec.transposed_output_shape(x.shape());
    const Conv3dSpec adj = spec.adjoint();
    Tensor<T> y = conv3d_backward_input(x.value(), weight.value(), adj, out_shape);
    conv_mac_counter() += static_cast<uint64_t>(x.value().numel() * (spec.out_channels / spec.groups) *
                                                spec.kernel_volume());
    if (bias.defined()) {
        const Layout l = layout_of(out_shape, "conv_transpose3d");
        for (int64_t s = 0; s < l.n; ++s) {
            for (int64_t k = 0; k < l.c; ++k) {
                T* p = y.data() + (s * l.c + k) * l.vox;
                const T b = bias.value()[k];
                for (int64_t v = 0; v < l.vox; ++v) p[v] += b;
            }
        }
    }
    return make_result<T>("conv_transpose3d", std::move(y), conv_inputs(x, weight, bias),
                          [adj](Node<T>& self) {
                              Node<T>& xn = *self.inputs[0];
                              Node<T>& wn = *self.inputs[1];
                              if (xn.requires_grad) {
                                  xn.accumulate(conv3d_forward<T>(self.grad, wn.value(), nullptr, adj));
                              }
                              if (wn.requires_grad) {
                                  wn.accumulate(conv3d_backward_weight(xn.value(), self.grad, adj));
                              }
                              if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                                  self.inputs[2]->accumulate(conv3d_backward_bias(self.grad));
                              }
                          });
}

void NormSpec::validate() const {
    if (!(eps > 0)) throw std::invalid_argument("NormSpec: eps must be positive");
    if (num_channels < 1) throw std::invalid_argument("NormSpec: num_channels must be positive");
}

namespace {

template <typename T>
void check_norm(const Var<T>& x, const NormSpec& spec, const Var<T>& gamma, const Var<T>& beta,
                const char* op) {
    spec.validate();
    const Layout l = layout_of(x.shape(), op);
    if (l.c != spec.num_channels) {
        throw ShapeError(std::string(op) + ": input has " + std::to_string(l.c) +
                         " channels, norm expects " + std::to_string(spec.num_channels));
    }
    check_param_shape(gamma, {spec.num_channels}, op);
    check_param_shape(beta, {spec.num_channels}, op);
}

}  // namespace

// Both normalizations share one backward form. With xhat the normalized value,
// g the upstream gradient and s = 1/sqrt(var + eps) over a group of size m:
//   dxhat = g * gamma
//   dx    = s * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
template <typename T>
Var<T> layer_norm_channel(const Var<T>& x, const NormSpec& spec, const Var<T>& gamma,
                          const Var<T>& beta) {
    check_norm(x, spec, gamma, beta, "layer_norm_channel");
    const Layout l = layout_of(x.shape(), "layer_norm_channel");
    Tensor<T> xhat(x.shape());
    Tensor<T> inv_std({l.n, l.vox});
    Tensor<T> y(x.shape());
    const T eps = static_cast<T>(spec.eps);
    const T* g = gamma.value().data();
    const T* b = beta.value().data();
    parallel_for(l.n, 1, [&](int64_t s0, int64_t s1) {
        std::vector<T> mu(static_cast<size_t>(l.vox)), var(static_cast<size_t>(l.vox));
        for (int64_t s = s0; s < s1; ++s) {
            const T* src = x.value().data() + s * l.c * l.vox;
            std::fill(mu.begin(), mu.end(), T(0));
            std::fill(var.begin(), var.end(), T(0));
            for (int64_t k = 0; k < l.c; ++k) {
                const T* row = src + k * l.vox;
                for (int64_t v = 0; v < l.vox; ++v) mu[v] += row[v];
            }
            const T invc = T(1) / static_cast<T>(l.c);
            for (int64_t v = 0; v < l.vox; ++v) mu[v] *= invc;
            for (int64_t k = 0; k < l.c; ++k) {
                const T* row = src + k * l.vox;
                for (int64_t v = 0; v < l.vox; ++v) {
                    const T d = row[v] - mu[v];
                    var[v] += d * d;
                }
            }
            T* is = inv_std.data() + s * l.vox;
            for (int64_t v = 0; v < l.vox; ++v) is[v] = T(1) / std::sqrt(var[v] * invc + eps);
            for (int64_t k = 0; k < l.c; ++k) {
                const T* row = src + k * l.vox;
                T* xh = xhat.data() + (s * l.c + k) * l.vox;
                T* out = y.data() + (s * l.c + k) * l.vox;
                for (int64_t v = 0; v < l.vox; ++v) {
                    xh[v] = (row[v] - mu[v]) * is[v];
                    out[v] = g[k] * xh[v] + b[k];
                }
            }
        }
    });
    return make_result<T>(
        "layer_norm_channel", std::move(y), {x, gamma, beta},
        [l, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
            const T* up = self.grad.data();
            const T* gm = self.inputs[1]->value().data();
            if (self.inputs[0]->requires_grad) {
                Tensor<T> dx(xhat.shape());
                parallel_for(l.n, 1, [&](int64_t s0, int64_t s1) {
                    std::vector<T> m1(static_cast<size_t>(l.vox)), m2(static_cast<size_t>(l.vox));
                    const T invc = T(1) / static_cast<T>(l.c);
                    for (int64_t s = s0; s < s1; ++s) {
                        std::fill(m1.begin(), m1.end(), T(0));
                        std::fill(m2.begin(), m2.end(), T(0));
                        for (int64_t k = 0; k < l.c; ++k) {
                            const T* gr = up + (s * l.c + k) * l.vox;
                            const T* xh = xhat.data() + (s * l.c + k) * l.vox;
                            for (int64_t v = 0; v < l.vox; ++v) {
                                const T d = gr[v] * gm[k];
                                m1[v] += d;
                                m2[v] += d * xh[v];
                            }
                        }
                        const T* is = inv_std.data() + s * l.vox;
                        for (int64_t k = 0; k < l.c; ++k) {
                            const T* gr = up + (s * l.c + k) * l.vox;
                            const T* xh = xhat.data() + (s * l.c + k) * l.vox;
                            T* out = dx.data() + (s * l.c + k) * l.vox;
                            for (int64_t v = 0; v < l.vox; ++v) {
                                out[v] = is[v] * (gr[v] * gm[k] - m1[v] * invc -
                                                  xh[v] * m2[v] * invc);
                            }
                        }
                    }
                });
                self.inputs[0]->accumulate(std::move(dx));
            }
            if (self.inputs[1]->requires_grad || self.inputs[2]->requires_grad) {
                Tensor<T> dg({l.c}), db({l.c});
                for (int64_t k = 0; k < l.c; ++k) {
                    T sg = 0, sb = 0;
                    for (int64_t s = 0; s < l.n; ++s) {
                        const T* gr = up + (s * l.c + k) * l.vox;
                        const T* xh = xhat.data() + (s * l.c + k) * l.vox;
                        for (int64_t v = 0; v < l.vox; ++v) {
                            sg += gr[v] * xh[v];
                            sb += gr[v];
                        }
                    }
                    dg[k] = sg;
                    db[k] = sb;
                }
                self.inputs[1]->accumulate(std::move(dg));
                self.inputs[2]->accumulate(std::move(db));
            }
        });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const NormSpec& spec, const Var<T>& gamma,
                     const Var<T>& beta) {
    check_norm(x, spec, gamma, beta, "instance_norm");
    const Layout l = layout_of(x.shape(), "instance_norm");
    Tensor<T> xhat(x.shape());
    Tensor<T> inv_std({l.n, l.c});
    Tensor<T> y(x.shape());
    const T* g = gamma.value().data();
    const T* b = beta.value().data();
    // Statistics accumulate in double so float32 volumes keep their precision.
    parallel_for(l.n * l.c, 1, [&](int64_t p0, int64_t p1) {
        for (int64_t p = p0; p < p1; ++p) {
            const int64_t k = p % l.c;
            const T* src = x.value().data() + p * l.vox;
            double mu = 0;
            for (int64_t v = 0; v < l.vox; ++v) mu += src[v];
            mu /= static_cast<double>(l.vox);
            double var = 0;
            for (int64_t v = 0; v < l.vox; ++v) {
                const double d = src[v] - mu;
                var += d * d;
            }
            var /= static_cast<double>(l.vox);
            const double is = 1.0 / std::sqrt(var + spec.eps);
            inv_std[p] = static_cast<T>(is);
            T* xh = xhat.data() + p * l.vox;
            T* out = y.data() + p * l.vox;
            for (int64_t v = 0; v < l.vox; ++v) {
                xh[v] = static_cast<T>((src[v] - mu) * is);
                out[v] = g[k] * xh[v] + b[k];
            }
        }
    });
    return make_result<T>(
        "instance_norm", std::move(y), {x, gamma, beta},
        [l, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
            const T* up = self.grad.data();
            const T* gm = self.inputs[1]->value().data();
            Tensor<T> dx(self.inputs[0]->requires_grad ? xhat.shape() : Shape{0});
            Tensor<T> dg({l.n, l.c}), db({l.n, l.c});
            parallel_for(l.n * l.c, 1, [&](int64_t p0, int64_t p1) {
                for (int64_t p = p0; p < p1; ++p) {
                    const int64_t k = p % l.c;
                    const T* gr = up + p * l.vox;
                    const T* xh = xhat.data() + p * l.vox;
                    double sg = 0, sgx = 0;
                    for (int64_t v = 0; v < l.vox; ++v) {
                        sg += gr[v];
                        sgx += static_cast<double>(gr[v]) * xh[v];
                    }
                    dg[p] = static_cast<T>(sgx);
                    db[p] = static_cast<T>(sg);
                    if (dx.numel() == 0) continue;
                    const double inv_m = 1.0 / static_cast<double>(l.vox);
                    const double m1 = sg * gm[k] * inv_m;
                    const double m2 = sgx * gm[k] * inv_m;
                    const double is = inv_std[p];
                    T* out = dx.data() + p * l.vox;
                    for (int64_t v = 0; v < l.vox; ++v) {
                        out[v] = static_cast<T>(is * (gr[v] * gm[k] - m1 - xh[v] * m2));
                    }
                }
            });
            if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(std::move(dx));
            Tensor<T> dgc({l.c}), dbc({l.c});
            for (int64_t s = 0; s < l.n; ++s) {
                for (int64_t k = 0; k < l.c; ++k) {
                    dgc[k] += dg[s * l.c + k];
                    dbc[k] += db[s * l.c + k];
                }
            }
            self.inputs[1]->accumulate(std::move(dgc));
            self.inputs[2]->accumulate(std::move(dbc));
        });
}

template <typename T>
Var<T> normalize(const Var<T>& x, const NormSpec& spec, const Var<T>& gamma, const Var<T>& beta) {
    return spec.kind == NormKind::LayerNormChannel ? layer_norm_channel(x, spec, gamma, beta)
                                                   : instance_norm(x, spec, gamma, beta);
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
    Tensor<T> y(x.shape());
    const T* src = x.value().data();
    for (int64_t i = 0; i < y.numel(); ++i) {
        y[i] = src[i] * T(0.5) * (T(1) + std::erf(src[i] * inv_sqrt2));
    }
    return make_result<T>("gelu", std::move(y), {x}, [inv_sqrt2](Node<T>& self) {
        // d/dx [x Phi(x)] = Phi(x) + x phi(x)
        const T inv_sqrt_2pi = static_cast<T>(0.39894228040143267794);
        const Tensor<T>& xv = self.inputs[0]->value();
        Tensor<T> dx(xv.shape());
        for (int64_t i = 0; i < dx.numel(); ++i) {
            const T v = xv[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            dx[i] = self.grad[i] * (cdf + v * pdf);
        }
        self.inputs[0]->accumulate(std::move(dx));
    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    Tensor<T> y(x.shape());
    const T* src = x.value().data();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = src[i] >= T(0) ? src[i] : slope * src[i];
    return make_result<T>("leaky_relu", std::move(y), {x}, [slope](Node<T>& self) {
        const Tensor<T>& xv = self.inputs[0]->value();
        Tensor<T> dx(xv.shape());
        for (int64_t i = 0; i < dx.numel(); ++i) {
            dx[i] = xv[i] >= T(0) ? self.grad[i] : slope * self.grad[i];
        }
        self.inputs[0]->accumulate(std::move(dx));
    });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int64_t factor) {
    if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be positive");
    const Shape& in = x.shape();
    layout_of(in, "upsample_nearest");
    if (factor == 1) return x;
    const Shape out{in[0], in[1], in[2] * factor, in[3] * factor, in[4] * factor};
    const int64_t planes = in[0] * in[1];
    const int64_t ih = in[2], iw = in[3], id = in[4];
    const int64_t oh = out[2], ow = out[3], od = out[4];
    Tensor<T> y(out);
    for (int64_t p = 0; p < planes; ++p) {
        const T* src = x.value().data() + p * ih * iw * id;
        T* dst = y.data() + p * oh * ow * od;
        for (int64_t h = 0; h < oh; ++h) {
            for (int64_t w = 0; w < ow; ++w) {
                const T* s = src + ((h / factor) * iw + w / factor) * id;
                T* d = dst + (h * ow + w) * od;
                for (int64_t z = 0; z < od; ++z) d[z] = s[z / factor];
            }
        }
    }
    return make_result<T>("upsample_nearest", std::move(y), {x}, [=](Node<T>& self) {
        Tensor<T> dx(in);
        for (int64_t p = 0; p < planes; ++p) {
            const T* g = self.grad.data() + p * oh * ow * od;
            T* d = dx.data() + p * ih * iw * id;
            for (int64_t h = 0; h < oh; ++h) {
                for (int64_t w = 0; w < ow; ++w) {
                    const T* gs = g + (h * ow + w) * od;
                    T* dd = d + ((h / factor) * iw + w / factor) * id;
                    for (int64_t z = 0; z < od; ++z) dd[z / factor] += gs[z];
                }
            }
        }
        self.inputs[0]->accumulate(std::move(dx));
    });
}

#define UXNET_INSTANTIATE_NN(T)                                                                    \
    template Var<T> conv3d<T>(const Var<T>&, const Conv3dSpec&, const Var<T>&, const Var<T>&);    \
    template Var<T> conv3d_depthwise_multiplier<T>(const Var<T>&, int64_t, const Var<T>&,          \
                                                   const Var<T>&);                                 \
    template Var<T> conv_transpose3d<T>(const Var<T>&, const Conv3dSpec&, const Var<T>&,           \
                                        const Var<T>&);                                            \
    template Var<T> layer_norm_channel<T>(const Var<T>&, const NormSpec&, const Var<T>&,           \
                                          const Var<T>&);                                          \
    template Var<T> instance_norm<T>(const Var<T>&, const NormSpec&, const Var<T>&,                \
                                     const Var<T>&);                                               \
    template Var<T> normalize<T>(const Var<T>&, const NormSpec&, const Var<T>&, const Var<T>&);   \
    template Var<T> gelu<T>(const Var<T>&);                                                        \
    template Var<T> leaky_relu<T>(const Var<T>&, T);                                               \
    template Var<T> upsample_nearest<T>(const Var<T>&, int64_t);

UXNET_INSTANTIATE_NN(float)
UXNET_INSTANTIATE_NN(double)

}  // namespace uxnet
