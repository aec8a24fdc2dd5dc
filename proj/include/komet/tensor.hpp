#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "komet/errors.hpp"

namespace komet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// One vertex of the reverse-mode graph. Leaves have no backward rule; an
// interior node's rule reads its own grad and accumulates into its parents.
template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;  // empty until the first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  Array& grad_buffer() {
    if (grad.size() != value.size()) grad = Array::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Shared handle to a row-major n-dimensional array that can take part in a
// differentiation graph. Copying a Tensor copies the handle, not the data;
// use clone() for an independent leaf.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using NodeType = detail::Node<Scalar>;
  using scalar_type = Scalar;

  Tensor() = default;

  Tensor(Shape shape, Array values, bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    for (Index d : shape) {
      if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (numel(shape) != values.size()) {
      throw DimensionError("shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false)
      : Tensor(std::move(shape), to_array(values), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array::Zero(n), requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array::Ones(n), requires_grad);
  }

  static Tensor full(Shape shape, Scalar value, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, value), requires_grad);
  }

  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return Tensor(Shape{1}, Array::Constant(1, value), requires_grad);
  }

  static Tensor from_node(std::shared_ptr<NodeType> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }

  // Negative axes count from the back.
  Index dim(int axis) const {
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
    }
    return node_->shape[static_cast<std::size_t>(a)];
  }

  const Array& values() const { return node_->value; }
  // Direct write access, for optimizers and finite-difference probes. Writes
  // are not tracked by the graph.
  Array& mutable_values() { return node_->value; }

  Scalar item() const {
    if (size() != 1) throw ContractError("item() needs a single-element tensor, got " + to_string(shape()));
    return node_->value[0];
  }

  Scalar at(std::initializer_list<Index> index) const {
    if (index.size() != node_->shape.size()) throw DimensionError("index rank mismatch for " + to_string(shape()));
    Index flat = 0;
    std::size_t axis = 0;
    for (Index i : index) {
      if (i < 0 || i >= node_->shape[axis]) throw DimensionError("index out of range for " + to_string(shape()));
      flat = flat * node_->shape[axis] + i;
      ++axis;
    }
    return node_->value[flat];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = flag;
  }

  bool is_leaf() const { return node_->is_leaf(); }
  const char* op() const { return node_->op; }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->value.size() > 0; }
  const Array& grad() const { return node_->grad; }
  Array& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Array(); }

  // New leaf holding a copy of the values; no gradient flows back through it.
  Tensor detach() const { return Tensor(shape(), values(), false); }

  Tensor clone() const { return Tensor(shape(), values(), requires_grad()); }

  // Reverse-mode sweep from a single-element tensor. Interior gradients are
  // recomputed on every call; leaf gradients accumulate across calls until
  // zero_grad() is called.
  void backward() const;

  const std::shared_ptr<NodeType>& node() const { return node_; }

 private:
  static Array to_array(std::initializer_list<Scalar> values) {
    Array a(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return a;
  }

  std::shared_ptr<NodeType> node_;
};

namespace detail {

// Builds the result of an operation. The backward rule is attached only when
// graph recording is on and at least one input needs a gradient.
template <typename Scalar, typename Backward>
Tensor<Scalar> make_result(const char* op, Shape shape, typename Tensor<Scalar>::Array value,
                           std::initializer_list<const Tensor<Scalar>*> inputs, Backward&& backward) {
  Tensor<Scalar> out(std::move(shape), std::move(value), false);
  bool needs_graph = false;
  if (grad_enabled()) {
    for (const Tensor<Scalar>* in : inputs) needs_graph = needs_graph || in->requires_grad();
  }
  if (!needs_graph) return out;
  auto& node = *out.node();
  node.op = op;
  node.requires_grad = true;
  for (const Tensor<Scalar>* in : inputs) node.parents.push_back(in->node());
  node.backward = std::forward<Backward>(backward);
  return out;
}

}  // namespace detail

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (!defined() || size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + (defined() ? to_string(shape()) : "<null>"));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order with each node once.
  std::vector<NodeType*> order;
  std::unordered_set<NodeType*> visited;
  std::vector<std::pair<NodeType*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeType* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeType* node : order) {
    if (!node->is_leaf()) node->grad = Array::Zero(node->value.size());
  }
  node_->grad_buffer()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeType* node = *it;
    if (!node->is_leaf()) node->backward(*node);
  }
}

}  // namespace komet
