#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "charlm/error.hpp"

namespace charlm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents that require it.
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T{});
    return grad;
  }
};

}  // namespace detail

// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Dense row-major tensor and a handle onto a node of the reverse-mode graph.
// Copies share the node; use clone() or detach() for an independent value.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    if (numel(shape) != values.size()) {
      throw ShapeMismatch("shape " + to_string(shape) + " does not hold " +
                          std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{}), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  static Tensor from_node(std::shared_ptr<NodeT> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  // Negative indices count from the back.
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeMismatch("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const T> values() const { return node_->value; }
  // In-place access for parameter updates; does not touch the graph.
  std::span<T> mutable_values() { return node_->value; }

  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // True when this tensor was produced by an op that recorded a backward rule.
  bool has_graph_link() const { return static_cast<bool>(node_->backward); }
  const char* op_name() const { return node_->op; }

  T item() const {
    if (size() != 1) throw NotScalar("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeMismatch("index rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= node_->shape[axis]) throw IndexOutOfRange("index " + std::to_string(i) + " on axis " + std::to_string(axis));
      flat = flat * node_->shape[axis] + i;
      ++axis;
    }
    return node_->value[flat];
  }

  // New leaf holding a copy of the values; no gradient path back to this one.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), node_->value, requires_grad); }

  NodeT* node() const noexcept { return node_.get(); }
  const std::shared_ptr<NodeT>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

// Reverse-mode sweep from a scalar. Gradients accumulate into every reachable
// node that requires grad; leaves keep theirs until zero_grad().
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw NotScalar("backward() needs a scalar loss, got shape " +
                    (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename T>
std::vector<T> to_vector(const Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

}  // namespace charlm
