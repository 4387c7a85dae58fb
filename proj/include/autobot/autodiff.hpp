#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "autobot/error.hpp"
#include "autobot/tensor.hpp"

namespace autobot {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
  std::size_t id = kInvalid;
  bool valid() const noexcept { return id != kInvalid; }
  friend bool operator==(Var, Var) = default;
};

/// Reverse-mode autodiff tape.
///
/// Nodes are appended in execution order, so the tape is a topological order
/// of the forward computation and backward() walks it once in reverse. A node
/// only keeps its backward closure when at least one input requires a
/// gradient; leaves created with requires_grad = false never receive one.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  /// Called with the upstream gradient of the node's output.
  using BackwardFn = std::function<void(const TensorT& grad_out, Tape& tape)>;

  Var leaf(TensorT value, bool requires_grad = false) {
    nodes_.push_back(Node{"leaf", std::move(value), {}, requires_grad, {}, {}});
    return Var{nodes_.size() - 1};
  }

  /// Appends the result of an operator. `backward` is dropped when no input
  /// requires a gradient.
  Var record(std::string op, TensorT value, const std::vector<Var>& inputs,
             BackwardFn backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || node(v).requires_grad;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (Var v : inputs) ids.push_back(v.id);
    nodes_.push_back(Node{std::move(op), std::move(value), {}, needs,
                          needs ? std::move(backward) : BackwardFn{}, std::move(ids)});
    return Var{nodes_.size() - 1};
  }

  const TensorT& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const std::string& op(Var v) const { return node(v).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulated for `v` by the last backward(); zeros if none reached it.
  TensorT grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return TensorT(n.value.shape());
    return n.grad;
  }

  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  /// Accumulation buffer for `v`, or nullptr when `v` does not require a
  /// gradient. Used by backward closures.
  TensorT* grad_buffer(Var v) {
    Node& n = node(v);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = TensorT(n.value.shape());
    return &n.grad;
  }

  void backward(Var loss) {
    if (!loss.valid() || loss.id >= nodes_.size()) {
      throw ValueError("backward: loss was not recorded on this tape");
    }
    Node& root = nodes_[loss.id];
    if (root.op == "leaf") {
      throw ValueError("backward: loss is a leaf, no recorded forward computation");
    }
    if (root.value.numel() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " +
                       shape_str(root.value.shape()));
    }
    if (!root.requires_grad) return;
    for (auto& n : nodes_) n.grad = TensorT();
    root.grad = TensorT(root.value.shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // The closure may allocate input buffers, which never reallocates nodes_.
      n.backward(n.grad, *this);
    }
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::string op;
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::vector<std::size_t> inputs;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw ValueError("tape: invalid variable handle");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw ValueError("tape: invalid variable handle");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

}  // namespace autobot
