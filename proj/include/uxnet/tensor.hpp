#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace uxnet {

using Shape = std::vector<int64_t>;

enum class DType : uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "tensors hold float or double");
    return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor. Volumes use the N,C,H,W,D layout.
///
/// Extents may be zero (an empty channel axis is a valid concat operand);
/// the buffer length always equals the product of the extents.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(checked_numel(shape_)), T(0));
    }
    Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(checked_numel(shape_)), fill);
    }
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != checked_numel(shape_)) {
            throw ShapeError("buffer of " + std::to_string(data_.size()) +
                             " elements does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int axis) const {
        if (axis < 0) axis += rank();
        return shape_.at(static_cast<size_t>(axis));
    }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool defined() const { return !shape_.empty() || !data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    T& at(std::initializer_list<int64_t> idx) { return data_[offset(idx)]; }
    const T& at(std::initializer_list<int64_t> idx) const { return data_[offset(idx)]; }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

private:
    static int64_t checked_numel(const Shape& shape) {
        for (int64_t e : shape) {
            if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
        }
        return shape_numel(shape);
    }

    size_t offset(std::initializer_list<int64_t> idx) const {
        if (idx.size() != shape_.size()) {
            throw ShapeError("index rank " + std::to_string(idx.size()) + " for shape " +
                             shape_str(shape_));
        }
        size_t off = 0;
        size_t axis = 0;
        for (int64_t i : idx) {
            if (i < 0 || i >= shape_[axis]) {
                throw std::out_of_range("index " + std::to_string(i) + " out of range on axis " +
                                        std::to_string(axis) + " of " + shape_str(shape_));
            }
            off = off * static_cast<size_t>(shape_[axis]) + static_cast<size_t>(i);
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

// Binary serialization: "UXT1", dtype (u8), rank (u8), extents (u64 LE), raw LE buffer.
template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

template <typename T>
Tensor<T> read_tensor(std::istream& is);

/// Reads the header of a serialized tensor without consuming the payload type check.
DType peek_tensor_dtype(std::istream& is);

}  // namespace uxnet
