#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hff/tensor.hpp"

namespace hff {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates `self.grad` into the parents. Null for leaves and constants.
  std::function<void(const Node& self)> backward_fn;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Releases uniquely owned ancestors iteratively so deep graphs do not
  // exhaust the stack.
  ~Node() {
    backward_fn = nullptr;
    std::vector<std::shared_ptr<Node>> pending = std::move(parents);
    while (!pending.empty()) {
      std::shared_ptr<Node> node = std::move(pending.back());
      pending.pop_back();
      if (node && node.use_count() == 1) {
        node->backward_fn = nullptr;
        for (auto& p : node->parents) pending.push_back(std::move(p));
        node->parents.clear();
      }
    }
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

/// Handle to a node of the reverse-mode graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<Scalar>& value() const { return node_->value; }
  // Only for leaves outside any live graph (optimizer updates, checkpoint loads).
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(Index axis) const { return node_->value.dim(axis); }
  Index rank() const { return node_->value.rank(); }
  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Zero-initialized gradient buffer of `node`, allocated on first use.
template <typename Scalar>
Tensor<Scalar>& grad_slot(Node<Scalar>& node) {
  if (node.grad.empty()) node.grad = Tensor<Scalar>(node.value.shape());
  return node.grad;
}

template <typename Scalar>
void accumulate(Node<Scalar>& node, const Tensor<Scalar>& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = g;
  } else {
    node.grad.array() += g.array();
  }
}

/// Wraps `value` as the output of an operation over `parents`. The backward
/// closure is attached only when recording is enabled and some parent needs
/// a gradient; otherwise the result is a constant.
template <typename Scalar, typename Backward>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> parents, Backward&& backward) {
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::forward<Backward>(backward);
  }
  return Var<Scalar>(std::move(node));
}

/// Reverse sweep from `root`, seeded with `seed` (ones when omitted).
/// Gradients accumulate into every reachable node that requires them,
/// including intermediates, so activations can be inspected afterwards.
template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> visited;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Node<Scalar>* top = root.node();
  if (seed) {
    require(seed->shape() == top->value.shape(), "backward seed shape mismatch");
    accumulate(*top, *seed);
  } else {
    accumulate(*top, Tensor<Scalar>(top->value.shape(), Scalar(1)));
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

}  // namespace hff
