#pragma once

#include <algorithm>
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

#include "mtkd/error.hpp"

namespace mtkd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording for its lifetime (teacher inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major array with optional reverse-mode gradient tracking.
///
/// A Tensor is a handle: copies share the underlying buffer and graph node.
/// Use clone() for an independent deep copy. Results of operations keep their
/// inputs alive through the graph until the last handle is dropped.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(const Node&)> backward_fn;
  };

  Tensor() : node_(std::make_shared<Node>()) { node_->shape = {0}; }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  const T* raw() const { return node_->data.data(); }

  /// Write access for leaves only (optimizer updates, data loading).
  std::span<T> mutable_data() {
    if (node_->backward_fn) throw Error("mutable_data() on a non-leaf tensor");
    return node_->data;
  }

  T operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward_fn; }

  void set_requires_grad(bool flag) {
    if (!is_leaf()) throw Error("requires_grad can only be set on leaves");
    node_->requires_grad = flag;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  /// Gradient buffer; all zeros if backward has not reached this tensor.
  std::vector<T> grad() const {
    if (node_->grad.empty()) return std::vector<T>(size(), T(0));
    return node_->grad;
  }

  void zero_grad() { node_->grad.clear(); }

  /// Independent leaf holding a copy of the values; never tracks the graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Independent leaf with copied values and the same requires_grad flag.
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out), requires_grad());
  }

  Tensor reshape(Shape new_shape) const;

  /// Reverse-mode accumulation from this scalar. Leaf gradients accumulate
  /// across calls until zero_grad(); intermediate gradients are recomputed.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& values, const char* what) {
  // x * 0 is NaN exactly for NaN and Inf inputs; the sum vectorizes.
  T probe = T(0);
  for (const T v : values) probe += v * T(0);
  if (probe == T(0)) return;
  for (const T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + what);
    }
  }
}

/// Wraps freshly computed values as an operation result. The backward
/// closure is attached only when recording is enabled and some parent
/// requires a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> parents,
                      std::function<void(const typename Tensor<T>::Node&)> backward_fn) {
  check_finite(data, op);
  Tensor<T> out(std::move(shape), std::move(data));
  const bool track =
      grad_enabled() && std::any_of(parents.begin(), parents.end(),
                                    [](const Tensor<T>& p) { return p.requires_grad(); });
  if (track) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& p : parents) node.parents.push_back(p.node());
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
  if (numel(new_shape) != size()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  auto self = node_;
  return detail::make_result<T>(
      "reshape", std::move(new_shape), node_->data, {*this},
      [self](const Node& out) {
        for (std::size_t i = 0; i < out.grad.size(); ++i) self->grad[i] += out.grad[i];
      });
}

template <typename T>
void Tensor<T>::backward() const {
  if (size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) {
    throw Error("backward() on a tensor that is detached from every parameter");
  }

  // Post-order DFS gives parents before children.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward_fn || n->grad.size() != n->data.size()) {
      n->grad.assign(n->data.size(), T(0));
    }
  }
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
  for (Node* n : order) {
    if (!n->backward_fn) detail::check_finite(n->grad, "backward");
  }
}

}  // namespace mtkd
