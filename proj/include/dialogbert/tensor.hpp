// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dialogbert/error.hpp"

namespace dialogbert {

/// Extents of a dense row-major array. Rank is capped at four.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;

  Shape(std::initializer_list<std::size_t> dims) : Shape(std::span<const std::size_t>(dims.begin(), dims.size())) {}

  explicit Shape(std::span<const std::size_t> dims) {
    if (dims.size() > kMaxRank) {
      throw ShapeError("tensor rank " + std::to_string(dims.size()) + " exceeds the maximum of 4");
    }
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (dims[i] == 0) {
        throw ShapeError("tensor extents must be positive");
      }
      dims_[i] = dims[i];
    }
    rank_ = dims.size();
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t back() const { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }
  std::span<const std::size_t> dims() const { return {dims_.data(), rank_}; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) {
      n *= dims_[i];
    }
    return n;
  }

  /// Number of rows when the last axis is viewed as the row.
  std::size_t rows() const { return numel() / back(); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < rank_; ++i) {
      os << (i ? "," : "") << dims_[i];
    }
    os << ']';
    return os.str();
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    return a.rank_ == b.rank_ && std::equal(a.dims_.begin(), a.dims_.begin() + a.rank_, b.dims_.begin());
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

/// Boolean array used to mark valid positions. Nonzero means valid.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(Shape s, std::vector<std::uint8_t> v) : shape(s), values(std::move(v)) {
    if (values.size() != shape.numel()) {
      throw ShapeError("mask data size does not match shape " + shape.str());
    }
  }
  static Mask ones(Shape s) { return Mask(s, std::vector<std::uint8_t>(s.numel(), 1)); }

  bool operator[](std::size_t i) const { return values[i] != 0; }
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) {
      grad.assign(value.size(), T(0));
    }
    return grad;
  }
};

/// Dense array that records the operations applied to it for reverse-mode
/// differentiation. Copies share the underlying graph node; operations always
/// allocate a fresh output buffer.
template <class T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "Tensor supports float and double");

 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != shape.numel()) {
      throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " + shape.str());
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(shape, T(0), requires_grad); }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    return from(shape, std::vector<T>(shape.numel(), v), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from(Shape{}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.rank(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Mutable access for leaves (parameters, inputs). Never used on graph outputs.
  std::span<T> mutable_data() { return node_->value; }
  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape().str());
    }
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (node_->requires_grad) {
      node_->ensure_grad();
      std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }
  }

  /// Same values, cut from the graph.
  Tensor detach() const { return from(shape(), node_->value, false); }

  void backward();

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread while alive.
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

/// Builds an op output. Graph edges are only recorded when some input needs a
/// gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = shape;
  n->value = std::move(value);
  n->leaf = false;
  for (const auto& in : inputs) {
    if (in.requires_grad() && grad_mode()) {
      n->requires_grad = true;
    }
  }
  if (n->requires_grad) {
    for (const auto& in : inputs) {
      n->inputs.push_back(in.node());
    }
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = shape;
  n->value = std::move(value);
  n->leaf = false;
  for (const auto& in : inputs) {
    n->requires_grad = n->requires_grad || (in.requires_grad() && grad_mode());
  }
  if (n->requires_grad) {
    for (const auto& in : inputs) {
      n->inputs.push_back(in.node());
    }
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

/// Gradient buffer of input `i`, or nullptr when that input needs none.
template <class T>
T* input_grad(Node<T>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? in.ensure_grad().data() : nullptr;
}

}  // namespace detail

template <class T>
void Tensor<T>::backward() {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape().str());
  }
  if (node_->backward_done) {
    throw ValueError("backward() called twice on the same loss");
  }
  if (!node_->requires_grad) {
    throw ValueError("backward() on a loss that does not depend on any trainable tensor");
  }

  // Iterative DFS producing a post-order (inputs before consumers).
  std::vector<Node<T>*> order;
  std::unordered_map<Node<T>*, int> state;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  state[node_.get()] = 1;
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (!child->requires_grad) {
        continue;
      }
      const int s = state[child];
      if (s == 1) {
        throw Error("cycle detected in the differentiation graph");
      }
      if (s == 0) {
        state[child] = 1;
        stack.emplace_back(child, 0);
      }
    } else {
      state[n] = 2;
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->leaf) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
  }
  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->leaf && n->backward_fn) {
      n->backward_fn(*n);
      std::vector<T>().swap(n->grad);
    }
  }
  node_->backward_done = true;
}

}  // namespace dialogbert
