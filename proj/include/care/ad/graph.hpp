#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "care/ad/tensor.hpp"
#include "care/error.hpp"

namespace care::ad {

template <typename T>
class Graph;

// Handle to a node recorded on a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool requires_grad() const { return graph->requires_grad(id); }
};

// Append-only tape for reverse-mode differentiation. Nodes are stored in a
// deque so references to recorded values stay valid while the tape grows.
// A graph is confined to one thread at a time.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const BasicTensor<T>& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(BasicTensor<T> value) {
    return push(std::move(value), false, nullptr, {});
  }

  // Leaf whose gradient is kept on the node (read back with grad()).
  Var<T> leaf(BasicTensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr, {});
  }

  // Leaf bound to a parameter; backward() adds into param.grad.
  Var<T> parameter(Parameter<T>& param) {
    Var<T> v = push(param.value, true, nullptr, {});
    nodes_[v.id].sink = &param;
    return v;
  }

  // Records an op result. The backward rule is kept only if some input
  // requires a gradient.
  Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    bool needs = false;
    for (const Var<T>& in : inputs) {
      if (in.graph != this) throw UsageError("op mixes vars from different graphs");
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr, {});
  }

  Var<T> record(BasicTensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn backward) {
    bool needs = false;
    for (const Var<T>& in : inputs) {
      if (in.graph != this) throw UsageError("op mixes vars from different graphs");
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr, {});
  }

  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient of the last backward() w.r.t. a node; zeros if none reached it.
  BasicTensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return BasicTensor<T>(n.value.shape(), T{0});
    return n.grad;
  }

  // Adds g into the gradient slot of v (no-op for constants).
  void accumulate(Var<T> v, const BasicTensor<T>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw UsageError("backward: gradient shape " + shape_str(g.shape()) +
                       " does not match value " + shape_str(n.value.shape()));
    }
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    T* dst = n.grad.data();
    const T* src = g.data();
    for (std::size_t i = 0, e = g.size(); i < e; ++i) dst[i] += src[i];
  }

  // Same as accumulate but takes ownership (avoids a copy on first write).
  void accumulate(Var<T> v, BasicTensor<T>&& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty() && g.shape() == n.value.shape()) {
      n.grad = std::move(g);
      return;
    }
    accumulate(v, static_cast<const BasicTensor<T>&>(g));
  }

  // Visits nodes in reverse append order, each exactly once.
  void backward(Var<T> loss) {
    if (loss.graph != this) throw UsageError("backward: var from another graph");
    const Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw UsageError("backward: loss must be scalar, got shape " +
                       shape_str(root.value.shape()));
    }
    for (Node& n : nodes_) n.grad = BasicTensor<T>();
    if (!root.requires_grad) return;
    nodes_[loss.id].grad = BasicTensor<T>(root.value.shape(), T{1});
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.sink) {
        T* dst = n.sink->grad.data();
        const T* src = n.grad.data();
        for (std::size_t i = 0, e = n.grad.size(); i < e; ++i) dst[i] += src[i];
      }
    }
  }

  // Piecewise ops (relu, maxpool) fold their branch choices into a running
  // hash while tracing is on. Two forward passes with equal signatures took
  // the same linear pieces everywhere.
  void enable_branch_trace() noexcept { trace_ = true; }
  bool tracing_branches() const noexcept { return trace_; }
  void note_branch(std::uint64_t choice) noexcept {
    branch_hash_ = (branch_hash_ ^ (choice + 1)) * 0x100000001b3ULL;
  }
  std::uint64_t branch_signature() const noexcept { return branch_hash_; }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* sink = nullptr;
  };

  Var<T> push(BasicTensor<T> value, bool requires_grad, BackwardFn backward,
              Parameter<T>* sink) {
    nodes_.push_back(Node{std::move(value), BasicTensor<T>(), requires_grad,
                          std::move(backward), sink});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  bool trace_ = false;
  std::uint64_t branch_hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace care::ad
