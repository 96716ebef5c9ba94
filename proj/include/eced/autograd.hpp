// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "eced/tensor.hpp"

namespace eced {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives d(root)/d(value) and accumulates into parents.
  std::function<void(const Tensor<T>&)> backward_fn;

  void accumulate(const Tensor<T>& g) {
    if (grad.empty())
      grad = g;
    else
      grad += g;
  }
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>::like(value);
    return grad;
  }
};

// Reverse-mode differentiable value. Copies share the underlying node.
template <typename T>
class Var {
 public:
  using value_type = T;

  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

  // Backpropagates from this scalar (or from a seeded gradient of matching shape).
  void backward() const { backward(Tensor<T>::like(value(), T(1))); }
  void backward(const Tensor<T>& seed) const {
    seed.require_same_shape(value(), "backward seed");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS to get a topological order.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node<T>* p = n->parents[idx++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->accumulate(seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && !n->grad.empty()) {
        n->backward_fn(n->grad);
        // Intermediate gradients are not needed after propagation.
        if (!n->parents.empty()) n->grad = Tensor<T>();
      }
    }
  }

  // Drops the graph behind this value, leaving a leaf.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op result. `backward` is called with the upstream gradient and must
// push gradients into inputs through `push_grad`.
template <typename T, typename F>
Var<T> make_op(Tensor<T> value, std::initializer_list<Var<T>> inputs, F&& backward) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  Node<T>* n = out.node();
  n->requires_grad = true;
  for (const auto& in : inputs)
    if (in.requires_grad()) n->parents.push_back(in.shared());
  n->backward_fn = std::forward<F>(backward);
  return out;
}

template <typename T>
void push_grad(const Var<T>& v, const Tensor<T>& g) {
  if (v.requires_grad()) v.node()->accumulate(g);
}

}  // namespace eced
