#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lungseg/errors.hpp"

namespace lungseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  bool consumed = false;  // op nodes flip to true after one backward pass
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
};

}  // namespace detail

/// Dense row-major tensor with optional participation in reverse-mode
/// autodiff. Copying a TensorT copies a handle to the same storage; ops build
/// a fresh graph every forward pass (define-by-run).
template <typename T>
class TensorT {
 public:
  using Scalar = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    return from_data(std::move(shape), {});
  }

  static TensorT full(Shape shape, T value) {
    auto t = zeros(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static TensorT scalar(T value) { return full({1}, value); }

  static TensorT from_data(Shape shape, std::vector<T> data) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    if (data.empty()) {
      node->data.assign(numel(node->shape), T(0));
    } else {
      if (data.size() != numel(node->shape)) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(node->shape));
      }
      node->data = std::move(data);
    }
    TensorT t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  const std::vector<T>& data() const { return node_->data; }
  std::vector<T>& mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool v = true) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (node_->grad.empty()) throw TapeError("gradient not populated; run backward first");
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void drop_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ShapeError("item() requires a one-element tensor, got " + shape_str(shape()));
    return node_->data[0];
  }

  T& at(std::size_t i) { return node_->data.at(i); }
  T at(std::size_t i) const { return node_->data.at(i); }

  /// Element access for rank-3 [C,H,W] tensors.
  T& at(std::size_t c, std::size_t y, std::size_t x) {
    return node_->data[index3(c, y, x)];
  }
  T at(std::size_t c, std::size_t y, std::size_t x) const {
    return node_->data[index3(c, y, x)];
  }

  /// Deep copy of the values; the clone is a fresh leaf.
  TensorT clone() const {
    auto t = from_data(node_->shape, node_->data);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  /// Detached view semantics are not needed at this scale: detach() is a
  /// leaf node sharing nothing with the source graph.
  TensorT detach() const { return from_data(node_->shape, node_->data); }

  NodePtr node() const { return node_; }

  static TensorT wrap(NodePtr node) {
    TensorT t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::size_t index3(std::size_t c, std::size_t y, std::size_t x) const {
    const Shape& s = node_->shape;
    if (s.size() != 3) throw ShapeError("3-index access on tensor of shape " + shape_str(s));
    if (c >= s[0] || y >= s[1] || x >= s[2]) throw ShapeError("index out of range");
    return (c * s[1] + y) * s[2] + x;
  }

  NodePtr node_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

namespace detail {

#ifndef NDEBUG
template <typename T>
inline void check_finite(const Node<T>& n, const char* op) {
  for (T v : n.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}
#else
template <typename T>
inline void check_finite(const Node<T>&, const char*) {}
#endif

/// Creates the result node of an op. Parents are recorded and the backward
/// rule attached only when some input needs gradients.
template <typename T>
std::shared_ptr<Node<T>> make_op_node(Shape shape, std::vector<T> data,
                                      std::vector<std::shared_ptr<Node<T>>> parents,
                                      std::function<void(Node<T>&)> backward,
                                      const char* op_name) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward);
  }
  check_finite(*node, op_name);
  return node;
}

template <typename T>
inline void ensure_grad(Node<T>& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), T(0));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Populates .grad on every
/// requires_grad tensor reachable from the loss. The recorded ops form the
/// tape; each op may be swept exactly once, so a second backward over the
/// same forward pass throws. Leaves (parameters, inputs) are reusable.
template <typename T>
void backward(const TensorT<T>& loss) {
  auto root = loss.node();
  if (!root) throw TapeError("backward on an empty tensor");
  if (root->data.size() != 1) {
    throw TapeError("backward requires a scalar loss, got " + shape_str(root->shape));
  }
  if (!root->requires_grad) {
    throw TapeError("loss does not require grad; nothing to differentiate");
  }

  // Topological order over the recorded ops (iterative DFS; inputs first).
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->is_leaf() && n->consumed) {
      throw TapeError("tape already consumed; rebuild the forward pass before calling backward again");
    }
  }

  for (auto* n : order) {
    n->grad.assign(n->data.size(), T(0));
  }
  root->grad[0] = T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
    if (!n->is_leaf()) n->consumed = true;
  }
}

}  // namespace lungseg
