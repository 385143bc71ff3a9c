#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "tsrm/error.hpp"

namespace tsrm {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One vertex of the reverse-mode graph.
///
/// `backward` reads `grad` of this node and accumulates (+=) into the grads
/// of `parents`. Leaves (inputs, parameters) have no backward function.
template <typename Scalar>
struct Node {
  Shape shape;
  Buffer<Scalar> value;
  Buffer<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Buffer<Scalar>::Zero(value.size());
  }
};

/// Handle to a dense row-major tensor participating in a differentiation
/// graph. Copies share the underlying node.
template <typename Scalar>
class Tensor {
 public:
  using NodeType = Node<Scalar>;
  using NodePtr = std::shared_ptr<NodeType>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = numel(shape);
    return from(std::move(shape), Buffer<Scalar>::Zero(n), requires_grad);
  }

  static Tensor constant(Shape shape, Scalar v, bool requires_grad = false) {
    const Index n = numel(shape);
    return from(std::move(shape), Buffer<Scalar>::Constant(n, v),
                requires_grad);
  }

  static Tensor from(Shape shape, Buffer<Scalar> data,
                     bool requires_grad = false) {
    require(data.size() == numel(shape), ErrorKind::Internal,
            "tensor data length " + std::to_string(data.size()) +
                " does not match shape " + shape_str(shape));
    auto node = std::make_shared<NodeType>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, const std::vector<Scalar>& data,
                     bool requires_grad = false) {
    Buffer<Scalar> buf =
        Eigen::Map<const Buffer<Scalar>>(data.data(), Index(data.size()));
    return from(std::move(shape), std::move(buf), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(int axis) const {
    return node_->shape[axis < 0 ? node_->shape.size() + axis : axis];
  }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }

  Buffer<Scalar>& value() { return node_->value; }
  const Buffer<Scalar>& value() const { return node_->value; }
  Scalar* data() { return node_->value.data(); }
  const Scalar* data() const { return node_->value.data(); }
  Scalar item() const { return node_->value(0); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  Buffer<Scalar>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const Buffer<Scalar>& grad() const { return node_->grad; }
  void zero_grad() {
    if (node_->grad.size()) node_->grad.setZero();
  }

  /// Same values, no graph history.
  Tensor detach() const {
    return from(node_->shape, node_->value, false);
  }

  NodePtr node() const { return node_; }

  /// Reverse pass from this tensor. A scalar root is seeded with 1; a
  /// non-scalar root needs an explicit seed.
  void backward() const {
    require(size() == 1, ErrorKind::Internal,
            "backward() without seed requires a scalar, got " +
                shape_str(shape()));
    backward(Buffer<Scalar>::Ones(1));
  }

  void backward(const Buffer<Scalar>& seed) const {
    if (!node_->requires_grad) return;
    std::vector<NodeType*> order;
    std::unordered_set<NodeType*> seen;
    // Iterative post-order DFS yields a topological order.
    std::vector<std::pair<NodeType*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        NodeType* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeType* n = *it;
      if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
    }
    // Interior grads are transient; only leaves keep theirs.
    for (NodeType* n : order)
      if (n->backward) n->grad.resize(0);
  }

 private:
  NodePtr node_;
};

namespace detail {

/// Builds a result node. When no parent needs a gradient the graph edge and
/// backward closure are dropped entirely.
template <typename Scalar, typename Fn>
Tensor<Scalar> make_result(Shape shape, Buffer<Scalar>&& value,
                           std::initializer_list<Tensor<Scalar>> parents,
                           Fn&& backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.defined() && p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const auto& p : parents)
      if (p.defined()) node->parents.push_back(p.node());
    node->backward = std::forward<Fn>(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, Buffer<Scalar>&& value,
                           const std::vector<Tensor<Scalar>>& parents,
                           std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

/// Accumulate into a parent's gradient if it participates.
template <typename Scalar, typename Expr>
inline void accumulate(const std::shared_ptr<Node<Scalar>>& parent,
                       const Expr& g) {
  if (!parent->requires_grad) return;
  parent->ensure_grad();
  parent->grad += g;
}

/// (outer, axis, inner) split of a shape around one axis.
struct AxisSplit {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline int normalize_axis(int axis, int ndim) {
  const int a = axis < 0 ? axis + ndim : axis;
  require(a >= 0 && a < ndim, ErrorKind::Internal,
          "axis " + std::to_string(axis) + " out of range for rank " +
              std::to_string(ndim));
  return a;
}

}  // namespace detail

}  // namespace tsrm
