#pragma once

#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "uxnet/tensor.hpp"

namespace uxnet {

template <typename T>
struct Parameter;

/// One value in a computation graph. Interior nodes keep their inputs and a
/// backward rule only while a tape is recording.
template <typename T>
struct Node {
    Tensor<T> stored;
    Tensor<T> grad;
    bool requires_grad = false;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;
    Parameter<T>* param = nullptr;

    const Tensor<T>& value() const;

    /// grad += g, allocating on first use. No-op for nodes outside the graph.
    void accumulate(const Tensor<T>& g);
    void accumulate(Tensor<T>&& g);
};

/// A trainable tensor with its gradient slot. Gradients accumulate across
/// backward passes until zero_grad().
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    /// A value that never receives gradients.
    static Var constant(Tensor<T> value);
    /// An input leaf; when `requires_grad` and a tape is active it is recorded
    /// so its gradient can be read after backward.
    static Var leaf(Tensor<T> value, bool requires_grad);
    /// A leaf bound to a parameter; backward adds into `p.grad`.
    static Var param(Parameter<T>& p);

    const Tensor<T>& value() const { return node_->value(); }
    const Shape& shape() const { return node_->value().shape(); }
    int64_t dim(int axis) const { return node_->value().dim(axis); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    /// Gradient after backward; zeros when the node was not reached.
    Tensor<T> grad() const;

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Records primitive ops in execution order, which is a topological order of
/// the graph. backward() replays it in reverse, visiting each node once.
template <typename T>
class GradTape {
public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    void record(std::shared_ptr<Node<T>> node) { nodes_.push_back(std::move(node)); }

    /// Seeds d(loss)/d(loss) = 1 and propagates. Parameter gradients are
    /// accumulated (+=), so call zero_grad between independent steps.
    void backward(const Var<T>& loss);

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }
    const std::vector<std::shared_ptr<Node<T>>>& nodes() const { return nodes_; }

    static GradTape* active() { return active_; }

private:
    template <typename U>
    friend class TapeScope;
    template <typename U>
    friend class NoGradScope;

    static inline thread_local GradTape* active_ = nullptr;
    std::vector<std::shared_ptr<Node<T>>> nodes_;
};

/// Makes `tape` the recording tape of the current thread for its lifetime.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(GradTape<T>& tape) : prev_(GradTape<T>::active_) {
        GradTape<T>::active_ = &tape;
    }
    ~TapeScope() { GradTape<T>::active_ = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradTape<T>* prev_;
};

/// Suspends recording for its lifetime (inference).
template <typename T>
class NoGradScope {
public:
    NoGradScope() : prev_(GradTape<T>::active()) { set(nullptr); }
    ~NoGradScope() { set(prev_); }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    static void set(GradTape<T>* t) { GradTape<T>::active_ = t; }
    GradTape<T>* prev_;
};

/// Builds the result node of a primitive. The backward rule receives the
/// result node; it reads `self.grad` and accumulates into `self.inputs[i]`.
template <typename T>
Var<T> make_result(std::string_view op, Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward);

}  // namespace uxnet
