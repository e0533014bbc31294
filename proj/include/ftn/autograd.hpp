#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ftn/tensor.hpp"

namespace ftn {

// One vertex of the reverse-mode graph: a value, its gradient buffer, and
// the closure that pushes the gradient into the producing operation's inputs.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on demand during backward()
    bool requires_grad{false};
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void(Node<T>&)> backprop;  // empty for leaves
    const char* op{"leaf"};

    bool is_leaf() const { return !backprop; }

    Tensor<T>& grad_buffer() {
        if (!grad.same_shape(value)) grad = Tensor<T>(value.shape());
        return grad;
    }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Shared handle to a graph node. Leaves with requires_grad=true are the
// trainable parameters; everything else is produced by the ops in ops.hpp.
template <typename T>
class Variable {
public:
    Variable() = default;

    explicit Variable(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    explicit Variable(NodePtr<T> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const NodePtr<T>& node() const { return node_; }

    // In-place update of a leaf's payload (optimizer step). Graph nodes are
    // immutable once produced, so only leaves may be assigned.
    void assign_value(Tensor<T> v) {
        if (!node_->is_leaf()) throw std::logic_error("assign_value: not a leaf");
        if (!v.same_shape(node_->value)) {
            throw std::invalid_argument("assign_value: shape " + shape_str(v.shape()) +
                                        " vs " + shape_str(node_->value.shape()));
        }
        node_->value = std::move(v);
    }

    Tensor<T>& mutable_value() {
        if (!node_->is_leaf()) throw std::logic_error("mutable_value: not a leaf");
        return node_->value;
    }

    void zero_grad() {
        if (node_) node_->grad = Tensor<T>();
    }

private:
    NodePtr<T> node_;
};

namespace detail {

// Post-order over the provenance DAG, visiting inputs in their stored order
// so the resulting accumulation order is a pure function of graph structure.
template <typename T>
void topo_sort(const NodePtr<T>& root, std::vector<Node<T>*>& order) {
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Reverse-mode accumulation from a scalar root into every requires-grad
// node of its provenance graph. Gradients of reachable nodes are reset
// first, so each call yields exactly this root's gradients.
template <typename T>
void backward(const Variable<T>& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined variable");
    if (root.value().numel() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got shape " +
                                    shape_str(root.value().shape()));
    }
    std::vector<Node<T>*> order;
    detail::topo_sort(root.node(), order);
    for (Node<T>* n : order) {
        if (n->requires_grad) n->grad_buffer().fill(T(0));
    }
    if (!root.node()->requires_grad) return;
    root.node()->grad_buffer().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->requires_grad && n->backprop) n->backprop(*n);
    }
}

}  // namespace ftn
