// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle: copies share the same storage and graph node.
// Use clone() for an independent copy. Any op whose inputs require a gradient
// records its parents and a backward closure on the result node; backward()
// walks that graph in reverse topological order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "msdino/error.hpp"

namespace msdino {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct Node {
  Shape dims;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() = default;

  explicit Tensor(Shape dims, T fill = T{0}) : node_(std::make_shared<NodeT>()) {
    for (auto d : dims)
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(dims));
    node_->data.assign(shape_numel(dims), fill);
    node_->dims = std::move(dims);
  }

  Tensor(Shape dims, std::vector<T> values) : node_(std::make_shared<NodeT>()) {
    for (auto d : dims)
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(dims));
    if (shape_numel(dims) != values.size())
      throw ShapeError("tensor of dims " + shape_str(dims) + " given " +
                       std::to_string(values.size()) + " values");
    node_->dims = std::move(dims);
    node_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  static Tensor from_node(std::shared_ptr<NodeT> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& dims() const { return node_->dims; }
  std::size_t dim(std::size_t axis) const { return node_->dims.at(axis); }
  std::size_t rank() const { return node_->dims.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of dims " + shape_str(dims()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }
  void clear_grad() { node_->grad.clear(); }

  bool is_leaf() const { return node_->is_leaf(); }

  /// Fresh leaf with a copy of the values and no gradient.
  Tensor clone() const { return Tensor(dims(), node_->data); }
  Tensor detach() const { return clone(); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
    return Tensor<U>(dims(), std::move(out));
  }

  NodeT& node() const { return *node_; }
  const std::shared_ptr<NodeT>& node_ptr() const { return node_; }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

namespace detail {

/// Builds an op result. Parents and the closure are kept only when recording
/// is enabled and at least one parent participates in differentiation.
template <typename T>
Tensor<T> make_result(Shape dims, std::vector<T> data, std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->dims = std::move(dims);
  node->data = std::move(data);
  bool track = false;
  if (grad_enabled())
    for (const auto& p : parents) track = track || p.requires_grad();
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Gradient buffer of parent `i` if it participates, else nullptr.
template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; callers zero them between optimisation steps.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() requires a scalar loss");
  if (!loss.requires_grad())
    throw ContractError("backward() on a value that was not recorded by the tape");

  using NodeT = detail::Node<T>;
  NodeT* root = loss.node_ptr().get();
  if (root->is_leaf()) {
    root->ensure_grad()[0] += T{1};
    return;
  }

  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // `order` is post-order: parents precede children.
  for (NodeT* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T{0});
  root->grad[0] = T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward(**it);
}

}  // namespace msdino
