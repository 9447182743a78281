#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every operation creates a Node holding its forward value, the nodes it
// read from, and a closure that pushes the node's gradient into those inputs.
// Nodes carry a monotonically increasing sequence number, so sorting reachable
// nodes by descending sequence yields a reverse topological order.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fedconv/tensor.hpp"

namespace fedconv {

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {
inline std::uint64_t next_node_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
struct Node {
    std::uint64_t seq = detail::next_node_seq();
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& ensure_grad() {
        if (grad.numel() != value.numel() || grad.shape() != value.shape()) {
            grad = Tensor<T>(value.shape());
        }
        return grad;
    }
};

/// Handle to a graph node. Copies share the node.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    /// Leaf variable (a parameter or an input).
    static Var leaf(Tensor<T> value, bool requires_grad, std::string name = "leaf") {
        auto node = std::make_shared<Node<T>>();
        node->op = std::move(name);
        node->value = std::move(value);
        node->requires_grad = requires_grad;
        return Var(std::move(node));
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
    bool has_grad() const { return node_->grad.numel() == node_->value.numel() && node_->grad.shape() == node_->value.shape(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    const std::string& op() const { return node_->op; }
    Node<T>* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

    void zero_grad() {
        node_->ensure_grad().fill(T(0));
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds the output node of an operation. When any input requires a gradient
/// and recording is enabled, the inputs and backward closure are retained.
template <typename T>
Var<T> make_result(std::string op, Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
    if (!value.all_finite()) {
        throw NonFiniteError("non-finite value produced by node '" + op + "'");
    }
    auto node = std::make_shared<Node<T>>();
    node->op = std::move(op);
    node->value = std::move(value);
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) needs = needs || (in && in->requires_grad);
    }
    if (needs) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward_fn = std::move(backward_fn);
    }
    return Var<T>(std::move(node));
}

/// Reverse pass from a scalar. Gradients accumulate into every reachable node
/// that requires one; callers zero parameter gradients between steps.
template <typename T>
void backward(const Var<T>& loss) {
    if (loss.value().numel() != 1) {
        throw ShapeError("backward requires a scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{loss.node()};
    seen.insert(loss.node());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& in : n->inputs) {
            if (in && in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

    loss.node()->ensure_grad()[0] += T(1);
    for (Node<T>* n : order) {
        if (n->backward_fn && n->grad.numel() == n->value.numel()) {
            for (const auto& in : n->inputs) {
                if (in && in->requires_grad) in->ensure_grad();
            }
            n->backward_fn(*n);
            // Interior gradients are consumed; a later pass over a shared
            // subgraph must not see them again.
            n->grad = Tensor<T>();
        }
    }
}

}  // namespace fedconv
