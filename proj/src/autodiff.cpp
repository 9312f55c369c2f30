#include "uxnet/autodiff.hpp"

#include <stdexcept>

namespace uxnet {

template <typename T>
const Tensor<T>& Node<T>::value() const {
    return param ? param->value : stored;
}

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (!grad.defined()) {
        grad = g;
        return;
    }
    T* dst = grad.data();
    const T* src = g.data();
    for (int64_t i = 0, n = grad.numel(); i < n; ++i) dst[i] += src[i];
}

template <typename T>
void Node<T>::accumulate(Tensor<T>&& g) {
    if (!requires_grad) return;
    if (!grad.defined()) {
        grad = std::move(g);
        return;
    }
    accumulate(static_cast<const Tensor<T>&>(g));
}

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->stored = std::move(value);
    return Var(std::move(n));
}

template <typename T>
Var<T> Var<T>::leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->stored = std::move(value);
    auto* tape = GradTape<T>::active();
    if (requires_grad && tape) {
        n->requires_grad = true;
        tape->record(n);
    }
    return Var(std::move(n));
}

template <typename T>
Var<T> Var<T>::param(Parameter<T>& p) {
    auto n = std::make_shared<Node<T>>();
    n->param = &p;
    n->op = "param";
    if (auto* tape = GradTape<T>::active()) {
        n->requires_grad = true;
        tape->record(n);
    }
    return Var(std::move(n));
}

template <typename T>
Tensor<T> Var<T>::grad() const {
    if (node_ && node_->grad.defined()) return node_->grad;
    return Tensor<T>(value().shape());
}

template <typename T>
void GradTape<T>::backward(const Var<T>& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward on an undefined value");
    if (loss.value().numel() != 1) {
        throw std::invalid_argument("backward needs a scalar loss, got shape " +
                                    shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    loss.node()->grad = Tensor<T>(loss.shape(), T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node<T>& n = **it;
        if (!n.grad.defined()) continue;
        if (n.backward_fn) {
            n.backward_fn(n);
            if (&n != loss.node().get()) n.grad = Tensor<T>();
        }
        if (n.param) {
            T* dst = n.param->grad.data();
            const T* src = n.grad.data();
            for (int64_t i = 0, e = n.grad.numel(); i < e; ++i) dst[i] += src[i];
        }
    }
}

template <typename T>
Var<T> make_result(std::string_view op, Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->stored = std::move(value);
    n->op = op;
    auto* tape = GradTape<T>::active();
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (tape && needs) {
        n->requires_grad = true;
        n->inputs.reserve(inputs.size());
        for (auto& in : inputs) n->inputs.push_back(in.node());
        n->backward_fn = std::move(backward);
        tape->record(n);
    }
    return Var<T>(std::move(n));
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template class GradTape<float>;
template class GradTape<double>;
template Var<float> make_result(std::string_view, Tensor<float>, std::vector<Var<float>>,
                                std::function<void(Node<float>&)>);
template Var<double> make_result(std::string_view, Tensor<double>, std::vector<Var<double>>,
                                 std::function<void(Node<double>&)>);

}  // namespace uxnet
