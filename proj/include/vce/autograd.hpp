#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vce/tensor.hpp"

namespace vce::ag {

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.shape() != value.shape() || grad.numel() != value.numel()) {
      grad = Tensor<T>(value.shape(), T{0});
    }
    return grad;
  }
};

/// Handle to a node of the reverse-mode graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  T item() const { return node_->value.item(); }

  /// Gradient accumulated by the last backward pass; zeros when none reached this node.
  const Tensor<T>& grad() const { return node_->ensure_grad(); }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.numel() == node_->value.numel(); }
  void zero_grad() {
    if (has_grad()) node_->grad.fill(T{0});
  }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  /// Back-propagates from this scalar with seed gradient 1.
  void backward() const {
    if (node_->value.numel() != 1) {
      throw std::logic_error("Var::backward requires a scalar; use backward(seed)");
    }
    backward(Tensor<T>(node_->value.shape(), T{1}));
  }

  void backward(const Tensor<T>& seed) const;

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
void Var<T>::backward(const Tensor<T>& seed) const {
  expect_same_shape(seed.shape(), node_->value.shape(), "Var::backward");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order. The order owns its
  // nodes because parent links are released as the pass proceeds.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{node_, 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      std::shared_ptr<Node<T>> p = top.first->parents[top.second++];
      if (p->requires_grad && visited.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  Tensor<T>& g = node_->ensure_grad();
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = it->get();
    if (!n->backward) continue;
    n->ensure_grad();
    n->backward(*n);
    // Graph is single-use; drop references so intermediates are freed.
    n->backward = nullptr;
    n->parents.clear();
  }
}

/// Creates the result node of an op. `backward` is only kept when grads are
/// being recorded and at least one parent needs them.
template <class T, class Fn>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, Fn&& backward) {
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = needs;
  if (needs) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::forward<Fn>(backward);
  }
  return Var<T>(std::move(node));
}

/// Accumulation target for parent `i` of `self`, or nullptr when it needs no gradient.
template <class T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

}  // namespace vce::ag
