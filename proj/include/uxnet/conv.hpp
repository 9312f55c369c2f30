#pragma once

#include <array>
#include <cstdint>

#include "uxnet/tensor.hpp"

namespace uxnet {

using Triple = std::array<int64_t, 3>;

/// Geometry of a 3D convolution over N,C,H,W,D tensors.
///
/// Weights are (out, in/groups, kh, kw, kd) for conv3d and
/// (in, out/groups, kh, kw, kd) for the transposed form.
struct Conv3dSpec {
    int64_t in_channels = 1;
    int64_t out_channels = 1;
    Triple kernel{1, 1, 1};
    Triple stride{1, 1, 1};
    Triple padding{0, 0, 0};
    int64_t groups = 1;
    bool bias = true;

    static Conv3dSpec cube(int64_t in, int64_t out, int64_t k, int64_t s = 1, int64_t p = 0,
                           int64_t groups = 1, bool bias = true) {
        return {in, out, {k, k, k}, {s, s, s}, {p, p, p}, groups, bias};
    }

    /// Throws std::invalid_argument naming the violated constraint.
    void validate() const;

    bool depthwise() const { return groups == in_channels && groups == out_channels; }
    bool pointwise() const;
    int64_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }

    Shape weight_shape() const;
    Shape transposed_weight_shape() const;

    /// floor((in + 2p - k) / s) + 1; throws when the result is below 1.
    int64_t output_extent(int axis, int64_t in) const;
    Shape output_shape(const Shape& input) const;
    /// (in - 1) * s - 2p + k
    Shape transposed_output_shape(const Shape& input) const;

    /// The forward convolution whose input-gradient is this transposed conv.
    Conv3dSpec adjoint() const {
        Conv3dSpec c = *this;
        c.in_channels = out_channels;
        c.out_channels = in_channels;
        return c;
    }
};

// Tensor-level kernels. Cross-correlation with zero padding, no kernel flip.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         const Conv3dSpec& spec);

template <typename T>
Tensor<T> conv3d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& weight,
                                const Conv3dSpec& spec, const Shape& input_shape);

template <typename T>
Tensor<T> conv3d_backward_weight(const Tensor<T>& grad_out, const Tensor<T>& x,
                                 const Conv3dSpec& spec);

/// Per-channel sum of grad_out over batch and space.
template <typename T>
Tensor<T> conv3d_backward_bias(const Tensor<T>& grad_out);

/// Multiply-accumulates performed by conv3d_forward on this thread since the
/// last reset. Lets tests compare analytic FLOP counts with executed work.
uint64_t& conv_mac_counter();

}  // namespace uxnet
