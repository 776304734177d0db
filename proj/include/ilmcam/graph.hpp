#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <vector>

#include "ilmcam/tensor.hpp"

namespace ilmcam {

/// Handle to a node recorded on a Graph.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  friend bool operator==(Var a, Var b) { return a.id == b.id; }
};

/// Tape of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape is already a
/// topological order; backward walks it once in reverse. A node only gets a
/// backward rule when at least one of its inputs needs a gradient, which
/// keeps frozen sub-networks free of gradient work.
///
/// Parameter leaves alias caller-owned tensors: their gradients accumulate
/// into Tensor::grad(), so the parameters must outlive the graph.
template <typename T>
class BasicGraph {
 public:
  using Scalar = T;
  using TensorType = BasicTensor<T>;
  using BackwardFn = std::function<void(BasicGraph&)>;

  BasicGraph() = default;
  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;
  BasicGraph(BasicGraph&&) = default;
  BasicGraph& operator=(BasicGraph&&) = default;

  /// Constant input; never receives a gradient.
  Var input(TensorType t) { return push(std::move(t), nullptr, false); }

  /// Owned leaf that receives a gradient (used by the checking harness).
  Var variable(TensorType t) { return push(std::move(t), nullptr, true); }

  /// Leaf aliasing an external parameter. Gradients flow into it only when
  /// the parameter is marked requires_grad.
  Var parameter(TensorType& t) {
    Node& n = push_node(nullptr, t.requires_grad());
    n.external = &t;
    return Var{nodes_.size() - 1};
  }

  const TensorType& value(Var v) const { return node(v).tensor(); }
  TensorType& value(Var v) { return node(v).tensor(); }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient buffer for a node, allocated (zeroed) on first use.
  std::span<T> grad(Var v) {
    Node& n = node(v);
    if (n.external) return n.external->ensure_grad();
    if (n.grad.size() != n.owned.numel()) n.grad.assign(n.owned.numel(), T(0));
    return n.grad;
  }

  bool has_grad(Var v) const {
    const Node& n = node(v);
    return n.external ? n.external->has_grad() : !n.grad.empty();
  }

  /// Appends an operation result. The backward rule is dropped when no
  /// input requires a gradient.
  Var record(TensorType out, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(out), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var record(TensorType out, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (Var in : inputs) needs = needs || node(in).requires_grad;
    Node& n = push_node(nullptr, needs);
    n.owned = std::move(out);
    if (needs) n.backward = std::move(backward);
    return Var{nodes_.size() - 1};
  }

  /// Reverse sweep seeded with d(loss)/d(loss) = 1; loss must be a scalar.
  void backward(Var loss) {
    if (value(loss).numel() != 1) {
      throw ShapeError("backward expects a scalar loss, got " + shape_str(shape(loss)));
    }
    std::vector<T> seed{T(1)};
    backward(loss, seed);
  }

  /// Reverse sweep seeded with an arbitrary upstream gradient for `out`.
  void backward(Var out, std::span<const T> seed) {
    if (seed.size() != value(out).numel()) {
      throw ShapeError("backward seed has " + std::to_string(seed.size()) + " entries, output has " +
                       std::to_string(value(out).numel()));
    }
    if (!requires_grad(out)) return;
    auto g = grad(out);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !has_grad(Var{i})) continue;
      n.backward(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorType owned;
    TensorType* external = nullptr;
    std::vector<T> grad;
    BackwardFn backward;
    bool requires_grad = false;

    TensorType& tensor() { return external ? *external : owned; }
    const TensorType& tensor() const { return external ? *external : owned; }
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this graph");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this graph");
    return nodes_[v.id];
  }

  Node& push_node(TensorType* external, bool requires_grad) {
    Node& n = nodes_.emplace_back();
    n.external = external;
    n.requires_grad = requires_grad;
    return n;
  }

  Var push(TensorType t, TensorType* external, bool requires_grad) {
    Node& n = push_node(external, requires_grad);
    n.owned = std::move(t);
    return Var{nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
};

using Graph = BasicGraph<float>;
using GraphD = BasicGraph<double>;

}  // namespace ilmcam
