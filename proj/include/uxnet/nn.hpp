#pragma once

#include <cstdint>

#include "uxnet/autodiff.hpp"
#include "uxnet/conv.hpp"

namespace uxnet {

/// Cross-correlation with zero padding. `bias` may be an undefined Var.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Conv3dSpec& spec, const Var<T>& weight,
              const Var<T>& bias = Var<T>());

/// Per-channel 1x1x1 expansion: output channel c*M+m = w[c*M+m] * x[c] + b[c*M+m].
/// Weight shape (C*M, 1, 1, 1, 1).
template <typename T>
Var<T> conv3d_depthwise_multiplier(const Var<T>& x, int64_t multiplier, const Var<T>& weight,
                                   const Var<T>& bias = Var<T>());

/// Transposed convolution, the adjoint of conv3d over the same geometry.
/// `spec.in_channels` is the channel count of `x`; weight shape is
/// spec.transposed_weight_shape().
template <typename T>
Var<T> conv_transpose3d(const Var<T>& x, const Conv3dSpec& spec, const Var<T>& weight,
                        const Var<T>& bias = Var<T>());

enum class NormKind { LayerNormChannel, InstanceNorm };

struct NormSpec {
    NormKind kind = NormKind::LayerNormChannel;
    int64_t num_channels = 1;
    double eps = 1e-6;

    static NormSpec layer_norm(int64_t c) { return {NormKind::LayerNormChannel, c, 1e-6}; }
    static NormSpec instance_norm(int64_t c) { return {NormKind::InstanceNorm, c, 1e-5}; }
    void validate() const;
};

/// Normalizes the channel vector at every voxel, then applies gamma/beta (shape (C)).
template <typename T>
Var<T> layer_norm_channel(const Var<T>& x, const NormSpec& spec, const Var<T>& gamma,
                          const Var<T>& beta);

/// Normalizes each (sample, channel) over its spatial extent, then applies gamma/beta.
template <typename T>
Var<T> instance_norm(const Var<T>& x, const NormSpec& spec, const Var<T>& gamma,
                     const Var<T>& beta);

/// Dispatches on spec.kind.
template <typename T>
Var<T> normalize(const Var<T>& x, const NormSpec& spec, const Var<T>& gamma, const Var<T>& beta);

/// Exact GELU, x * Phi(x) with Phi from erf.
template <typename T>
Var<T> gelu(const Var<T>& x);

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope);

/// Nearest-neighbour upsampling of the three spatial axes by an integer factor.
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int64_t factor);

}  // namespace uxnet
