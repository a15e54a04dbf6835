#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "iblm/error.hpp"
#include "iblm/tensor.hpp"

namespace iblm {

using NodeId = std::size_t;

class Tape;

// Handle to a tensor recorded on a tape. Cheap to copy; the tape owns the data.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool has_grad() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

// Append-only record of operations. Nodes are created after their inputs, so
// reverse creation order is a valid reverse topological order.
class Tape {
 public:
  // Reads the gradient of node `self` and accumulates into its inputs.
  using BackwardFn = std::function<void(Tape&, NodeId self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{"leaf", std::move(value), std::nullopt, {}, nullptr, requires_grad});
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(std::string op, Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
    bool needs_grad = false;
    for (auto in : inputs) {
      if (in >= nodes_.size()) throw TapeError(op + ": input id " + std::to_string(in) + " is not on this tape");
      needs_grad = needs_grad || nodes_[in].requires_grad;
    }
    nodes_.push_back(Node{std::move(op), std::move(value), std::nullopt, std::move(inputs),
                          needs_grad ? std::move(backward) : BackwardFn{}, needs_grad});
    return {this, nodes_.size() - 1};
  }

  void backward(Var loss) {
    if (loss.tape != this) throw TapeError("backward: loss is not recorded on this tape");
    const auto& lv = value(loss.id);
    if (lv.size() != 1) throw ShapeError("backward", lv.shape(), "loss must be a scalar");
    if (backward_done_) throw TapeError("backward: gradients already populated; call reset_grads() first");
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_slot(loss.id).fill(1.0);
    for (NodeId id = loss.id + 1; id-- > 0;) {
      auto& node = nodes_[id];
      if (node.backward && node.grad) node.backward(*this, id);
    }
    for (NodeId id = 0; id <= loss.id; ++id) {
      const auto& node = nodes_[id];
      if (!node.grad || !node.inputs.empty()) continue;
      const auto& g = node.grad->storage();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i])) throw NonFiniteError("backward: non-finite gradient at leaf " + std::to_string(id), i);
      }
    }
  }

  // Clears every gradient so that backward() may run again on the same graph.
  void reset_grads() {
    for (auto& n : nodes_) n.grad.reset();
    backward_done_ = false;
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(NodeId id) const { return nodes_.at(id).grad.has_value(); }
  const std::string& op_name(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor& grad(NodeId id) const {
    const auto& n = nodes_.at(id);
    if (!n.grad) throw TapeError("grad: node " + std::to_string(id) + " (" + n.op + ") has no gradient");
    return *n.grad;
  }

  // Gradient storage for `id`, zero-initialized on first access.
  Tensor& grad_slot(NodeId id) {
    auto& n = nodes_[id];
    if (!n.grad) n.grad.emplace(n.value.shape(), 0.0);
    return *n.grad;
  }

  // Adds `g` into the gradient of `id` if that node participates in differentiation.
  void accumulate(NodeId id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    auto& slot = grad_slot(id);
    auto& dst = slot.storage();
    const auto& src = g.storage();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::optional<Tensor> grad;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return tape->grad(id); }
inline bool Var::has_grad() const { return tape->has_grad(id); }

}  // namespace iblm
