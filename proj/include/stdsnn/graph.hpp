#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stdsnn/tensor.hpp"

namespace stdsnn {

/// One record in the reverse-mode computation graph. Leaves carry no op
/// record; interior nodes keep references to their inputs plus a closure
/// that scatters the node's gradient into the inputs' gradients.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // same shape as value, accumulates
  bool requires_grad = false;
  const char* op = "";  // empty for leaves
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void(Node<T>&)> backward;

  Node() = default;
  explicit Node(Tensor<T> v) : value(std::move(v)), grad(Tensor<T>::zeros_like(value)) {}
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> make_leaf(Tensor<T> v, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>(std::move(v));
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
NodePtr<T> make_op(const char* op, Tensor<T> v, std::vector<NodePtr<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>(std::move(v));
  n->op = op;
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  if (n->requires_grad) {
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return n;
}

namespace detail {

// Iterative post-order DFS; inputs visited in declaration order, so the
// traversal (and therefore gradient accumulation order) is a pure function
// of graph structure.
template <typename T>
std::vector<Node<T>*> topo_order(Node<T>& root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* in = node->inputs[next++].get();
      if (visited.insert(in).second) stack.emplace_back(in, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Reverse topological sweep from a scalar loss. Interior-node gradients are
/// per-pass scratch (zeroed here); leaf gradients accumulate, so a second call
/// without zero_grads adds another d(loss)/d(leaf).
template <typename T>
void backprop(const NodePtr<T>& loss) {
  if (loss->value.numel() != 1)
    throw std::invalid_argument("backprop: loss must be scalar, got " +
                                shape_str(loss->value.shape()));
  auto order = detail::topo_order(*loss);
  for (Node<T>* n : order)
    if (n->backward) n->grad.fill(T(0));
  loss->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->requires_grad && n->backward) n->backward(*n);
  }
}

/// Zero the gradients of every node reachable from root.
template <typename T>
void zero_grads(const NodePtr<T>& root) {
  for (Node<T>* n : detail::topo_order(*root)) n->grad.fill(T(0));
}

}  // namespace stdsnn
