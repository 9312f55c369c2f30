#pragma once

#include <vector>

#include "uxnet/autodiff.hpp"

namespace uxnet {

// Elementwise ops require equal shapes; the only broadcast is a scalar operand.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul_scalar(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);

/// Sum over `axes` (all axes when empty). Reduced axes are dropped, or kept
/// with extent 1 when `keepdims`.
template <typename T> Var<T> sum(const Var<T>& x, std::vector<int> axes = {}, bool keepdims = false);
template <typename T> Var<T> mean(const Var<T>& x, std::vector<int> axes = {}, bool keepdims = false);

/// Concatenates along axis 1; `a` occupies channels [0, Ca).
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// Softmax over axis 1 at every (n, voxel), max-subtracted.
template <typename T> Var<T> softmax_channels(const Var<T>& x);
template <typename T> Tensor<T> softmax_channels(const Tensor<T>& x);

/// Sum of all elements in a fixed pairwise order (bitwise reproducible).
template <typename T> T ordered_sum(const T* data, int64_t n);

/// Throws ShapeError naming both shapes when they differ.
void require_same_shape(const Shape& a, const Shape& b, const char* op);

}  // namespace uxnet
