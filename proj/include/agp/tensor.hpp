/*
 * Copyright 2026 The AGP-MIL Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/** @file tensor.hpp Dense float64 tensors with an eager gradient tape.
 *
 * A Tensor is a cheap handle onto a shared node. Nodes produced by an
 * operation whose inputs require gradients remember their parents and a
 * backward closure; everything else is a plain value. The tape is the
 * graph of shared pointers itself, so dropping the last handle to a loss
 * releases the whole graph of that step.
 */

#pragma once

#include <agp/error.hpp>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace agp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first touched by backward
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + detail::shape_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }
  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->value[i * n + i] = 1.0;
    return t;
  }

  /// Leaf that accumulates gradients during backward().
  static Tensor leaf(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  const Shape& shape() const noexcept { return node_->shape; }
  std::size_t rank() const noexcept { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const noexcept { return node_->value.size(); }

  std::span<const double> data() const noexcept { return node_->value; }
  const std::vector<double>& values() const noexcept { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t i, std::size_t j) const {
    assert(rank() == 2);
    return node_->value[i * node_->shape[1] + j];
  }
  double item() const {
    if (numel() != 1) {
      throw DimensionError("item() on tensor of shape " + detail::shape_string(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  bool is_leaf() const noexcept { return node_->leaf; }

  /// Accumulated gradient; zeros when backward has not reached this tensor.
  std::vector<double> grad() const {
    if (node_->grad.size() != node_->value.size()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
  }

  void zero_grad() const { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// Same values, no graph.
  Tensor detach() const { return Tensor(shape(), values()); }

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  // Low-level access used by operation implementations and the optimizer.
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  std::vector<double>& mutable_values() const noexcept { return node_->value; }
  std::vector<double>& mutable_grad() const { return node_->grad_buffer(); }

  static Tensor from_node(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime (evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Builds the result node of an operation. The backward closure is kept
/// only when at least one parent participates in the graph.
inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents,
                          std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(value));
  const bool needs = grad_mode() && std::any_of(parents.begin(), parents.end(),
                                                [](const Tensor& p) { return p.requires_grad(); });
  if (needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.leaf = false;
    node.parents.reserve(parents.size());
    for (auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::move(backward);
  }
  return out;
}

/// Gradient buffer of parent `i` when it takes part in the graph, else null.
inline std::vector<double>* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate; the
/// gradients of intermediate nodes are reset first, so repeated calls on
/// the same graph add identical contributions to the leaves.
inline void backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw DimensionError("backward() needs a scalar root, got shape " +
                         detail::shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->leaf && (*it)->backward) (*it)->backward(**it);
  }
}

/// Named trainable leaf. Copies share storage with the original.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Shape shape, std::vector<double> values)
      : name_(std::move(name)), value_(Tensor::leaf(std::move(shape), std::move(values))) {}

  const std::string& name() const noexcept { return name_; }
  const Tensor& value() const noexcept { return value_; }
  operator const Tensor&() const noexcept { return value_; }
  const Shape& shape() const noexcept { return value_.shape(); }
  std::size_t numel() const noexcept { return value_.numel(); }

  std::vector<double>& data() const noexcept { return value_.mutable_values(); }
  std::vector<double>& grad() const { return value_.mutable_grad(); }
  void zero_grad() const { std::fill(grad().begin(), grad().end(), 0.0); }

 private:
  std::string name_;
  Tensor value_;
};

}  // namespace agp
