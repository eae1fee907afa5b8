// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensor with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Every operation allocates a
// new node that stores its value, links to its parents and carries a closure
// that pushes gradient from the node into its parents. backward(loss) walks
// the graph from a scalar loss in reverse topological order and accumulates
// into the .grad buffer of every node with requires_grad set. Repeated
// backward calls accumulate; call zero_grad() between steps.
//
// Contracts:
//   - every operation checks its output for NaN/Inf and throws NumericError;
//   - a node's gradient buffer has the same shape as its value;
//   - one graph is owned by one thread; independent graphs are independent.

#ifndef TSRELAB_TENSOR_HPP
#define TSRELAB_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tsrelab/errors.hpp"
#include "tsrelab/rng.hpp"

namespace tsrelab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad, accumulates into parents' grad buffers.
  std::function<void(Node&)> backward;

  double* grad_data() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {}, 0.0);
  }

  static Tensor full(Shape shape, double v) {
    return from_data(std::move(shape), {}, v);
  }

  static Tensor scalar(double v) {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->value.assign(1, v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("Tensor::from: " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  /// i.i.d. N(mean, stddev^2) entries drawn from the given stream.
  static Tensor randn(Shape shape, Rng& rng, double mean = 0.0,
                      double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.node_->value) v = rng.normal(mean, stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }

  std::span<const double> value() const { return node_->value; }
  /// In-place mutation for initializers and the optimizer. Must not be used
  /// on interior nodes of a live graph.
  std::span<double> mutable_value() { return node_->value; }

  double item() const {
    if (size() != 1)
      throw UsageError("item(): tensor has " + std::to_string(size()) +
                       " elements");
    return node_->value[0];
  }

  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->value[r * node_->shape[1] + c];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  /// Gradient accumulated by backward(); empty span if never touched.
  std::span<const double> grad() const { return node_->grad; }

  void zero_grad() { node_->grad.clear(); }

  const char* op_name() const { return node_->op; }

  std::shared_ptr<detail::Node> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  static Tensor from_data(Shape shape, std::vector<double> data, double fill) {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    std::size_t n = shape_numel(shape);
    t.node_->shape = std::move(shape);
    if (data.empty())
      t.node_->value.assign(n, fill);
    else
      t.node_->value = std::move(data);
    return t;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const Node& n) {
  for (double v : n.value)
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite value produced by op '") +
                         n.op + "'");
}

/// Allocates the result node for an op. requires_grad is inherited from the
/// parents; the caller installs the backward closure only when it matters.
inline std::shared_ptr<Node> make_node(const char* op, Shape shape,
                                       std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  return n;
}

}  // namespace detail

/// The reverse-accumulation pass over the graph that produced `loss`.
///
/// Records the reachable differentiable subgraph in topological order, then
/// replays it backwards. The order is a function of graph structure only, so
/// identical forward computations give bit-identical gradients.
class Tape {
 public:
  explicit Tape(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw UsageError("backward: loss must be a defined scalar tensor");
    root_ = loss.node();
    if (!root_->requires_grad) return;  // no differentiable leaves reachable
    // Iterative post-order DFS through requires_grad nodes.
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root_.get(), 0);
    seen.insert(root_.get());
    while (!stack.empty()) {
      auto& top = stack.back();
      detail::Node* node = top.first;
      if (top.second < node->parents.size()) {
        detail::Node* p = node->parents[top.second++].get();
        if (p->requires_grad && seen.insert(p).second)
          stack.emplace_back(p, 0);  // may invalidate `top`
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  /// Number of recorded operations (diagnostic).
  std::size_t size() const { return order_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and accumulates into every reachable
  /// requires_grad leaf. Gradients add onto whatever is already stored.
  void run() {
    if (order_.empty()) return;
    root_->grad_data()[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;  // topological, leaves first
};

/// Reverse-mode gradient of a scalar loss w.r.t. every requires_grad leaf.
inline void backward(const Tensor& loss) {
  Tape tape(loss);
  tape.run();
}

}  // namespace tsrelab

#endif  // TSRELAB_TENSOR_HPP
