#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "incomes/core/error.hpp"
#include "incomes/core/tensor.hpp"

namespace incomes {

template <class T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// Gradient accumulated by the last backward pass (zeros if none reached it).
  const Tensor<T>& grad() const { return graph_->grad_of(id_); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape for reverse-mode differentiation. Nodes are appended in evaluation
/// order, so node ids are a topological order and backward walks them in
/// reverse. Parameters are aliased (not copied): their gradients accumulate
/// straight into Parameter::grad.
template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> t) { return push("const", {}, std::move(t), false); }

  /// Owned leaf that collects a gradient (used by tests and oracles).
  Var<T> leaf(Tensor<T> t, bool requires_grad = true) {
    return push("leaf", {}, std::move(t), requires_grad && grad_enabled_);
  }

  /// Aliases a parameter. In a grad-disabled graph the parameter is only read.
  Var<T> param(Parameter<T>& p) {
    Node n;
    n.op = "param";
    n.ext_value = &p.value;
    n.needs_grad = grad_enabled_ && p.trainable;
    if (n.needs_grad) {
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
      n.ext_grad = &p.grad;
    }
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ext_value ? *n.ext_value : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient buffer of a node, allocated (zero) on first use.
  Tensor<T>& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.ext_grad) return *n.ext_grad;
    if (n.grad.size() != value(id).size() || n.grad.shape() != value(id).shape()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }

  /// Appends an op result. `fn` is kept only if some input needs a gradient.
  Var<T> record(const char* op, std::vector<std::size_t> inputs, Tensor<T> out, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_)
      for (auto i : inputs) needs = needs || nodes_[i].needs_grad;
    Var<T> v = push(op, std::move(inputs), std::move(out), needs);
    if (needs) nodes_.back().backward = std::move(fn);
    return v;
  }

  void backward(const Var<T>& loss) {
    if (&loss.graph() != this) throw ContractError("backward: loss belongs to another graph");
    if (value(loss.id()).size() != 1)
      throw ContractError("backward: loss must be a scalar, got shape " + shape_str(value(loss.id()).shape()));
    if (!nodes_[loss.id()].needs_grad) return;
    grad_of(loss.id())[0] += T{1};
    visit_order_.clear();
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.needs_grad || n.grad.size() == 0) continue;
      visit_order_.push_back(i);
      n.backward(*this, i);
    }
  }

  /// Node ids whose backward rule ran during the last backward(), in order.
  const std::vector<std::size_t>& last_backward_order() const { return visit_order_; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_[id].inputs; }
  const std::string& op_of(std::size_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    const Tensor<T>* ext_value = nullptr;
    Tensor<T>* ext_grad = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var<T> push(const char* op, std::vector<std::size_t> inputs, Tensor<T> out, bool needs) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(out);
    n.needs_grad = needs;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;  // stable references across push_back
  std::vector<std::size_t> visit_order_;
};

}  // namespace incomes
