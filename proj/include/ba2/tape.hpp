// Reverse-mode tape. Nodes own their value and gradient tensors; ops append
// records in execution order, so a single reverse sweep visits every op once.
// Gradient accumulation is additive: a node consumed by two ops receives the
// sum of both contributions.
#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "ba2/common.hpp"
#include "ba2/tensor.hpp"

namespace ba2 {

using NodeId = int;

template <typename T>
class Tape {
 public:
  NodeId leaf(Tensor4<T> value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), Tensor4<T>(), needs_grad});
    Node& nd = nodes_.back();
    nd.grad = Tensor4<T>::zeros_like(nd.val);
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  // Appends one op record. The closure reads grad(out) and accumulates into
  // the grads of its inputs; it must only add, never overwrite.
  void record(NodeId out, std::function<void(Tape&)> back) {
    records_.push_back(Record{out, std::move(back)});
  }

  Tensor4<T>& val(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)).val; }
  const Tensor4<T>& val(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).val; }
  Tensor4<T>& grad(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)).grad; }
  const Tensor4<T>& grad(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).grad; }
  bool needs_grad(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).needs; }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t record_count() const { return records_.size(); }

  void zero_grads() {
    for (Node& nd : nodes_) std::fill(nd.grad.v.begin(), nd.grad.v.end(), T(0));
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the records in reverse. Ops not on a
  // path to the loss see a zero upstream gradient and contribute nothing, so
  // unreachable nodes end with zero grad.
  void backward(NodeId loss) {
    Tensor4<T>& l = val(loss);
    if (l.size() != 1) throw ShapeError("backward: loss must be scalar, got " + l.shape_str());
    zero_grads();
    grad(loss).v[0] = T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->back(*this);
  }

 private:
  struct Node {
    Tensor4<T> val;
    Tensor4<T> grad;
    bool needs = false;
  };
  struct Record {
    NodeId out;
    std::function<void(Tape&)> back;
  };

  std::vector<Node> nodes_;
  std::vector<Record> records_;
};

}  // namespace ba2
