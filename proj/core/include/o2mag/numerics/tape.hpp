#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "o2mag/numerics/tensor.hpp"

namespace o2mag {

template <typename T>
class BasicTape;

/// Handle to a value recorded on a tape.
template <typename T>
struct BasicVar {
  BasicTape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Reverse-mode tape. Nodes are appended in execution order, so the node list
/// is always a topological order; backward walks it in reverse.
template <typename T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;
  using VarT = BasicVar<T>;
  using ForwardFn = std::function<TensorT(const BasicTape&)>;
  // Reads grad(self) and accumulates into the gradients of the node's inputs.
  using BackwardFn = std::function<void(BasicTape&, std::size_t self)>;

  struct Node {
    std::string op;
    std::string name;
    std::vector<std::size_t> inputs;
    TensorT owned;
    const TensorT* borrowed = nullptr;
    TensorT grad;
    bool requires_grad = false;
    ForwardFn forward;
    BackwardFn backward;

    const TensorT& value() const { return borrowed ? *borrowed : owned; }
    bool is_leaf() const { return !forward; }
  };

  explicit BasicTape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  VarT leaf(TensorT value, bool requires_grad = false, std::string name = {}) {
    Node n;
    n.op = "leaf";
    n.name = std::move(name);
    n.owned = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Leaf that refers to a tensor owned elsewhere (model weights). The tensor
  /// must outlive the tape.
  VarT borrow(const TensorT& value, bool requires_grad = false, std::string name = {}) {
    Node n;
    n.op = "leaf";
    n.name = std::move(name);
    n.borrowed = &value;
    n.requires_grad = grad_enabled_ && requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  VarT record(std::string_view op, std::vector<VarT> inputs, ForwardFn forward, BackwardFn backward) {
    Node n;
    n.op = std::string(op);
    bool needs = false;
    for (const auto& v : inputs) {
      check_owned(v);
      n.inputs.push_back(v.id);
      needs = needs || nodes_[v.id].requires_grad;
    }
    n.owned = forward(*this);
    n.forward = std::move(forward);
    n.requires_grad = grad_enabled_ && needs;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const TensorT& value(VarT v) const {
    check_owned(v);
    return nodes_[v.id].value();
  }
  const TensorT& value(std::size_t id) const { return nodes_[id].value(); }
  bool requires_grad(VarT v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer for accumulation inside backward rules; allocated on first use.
  TensorT& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value().size() || n.grad.shape() != n.value().shape()) {
      n.grad = TensorT(n.value().shape());
    }
    return n.grad;
  }

  /// Gradient of the last backward() loss with respect to v; zeros if v was not reached.
  TensorT grad(VarT v) const {
    check_owned(v);
    const Node& n = nodes_[v.id];
    if (n.grad.shape() == n.value().shape() && n.grad.size() == n.value().size()) return n.grad;
    return TensorT(n.value().shape());
  }

  void backward(VarT loss) {
    check_owned(loss);
    const TensorT& lv = nodes_[loss.id].value();
    if (lv.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_string(lv.shape()));
    }
    for (auto& n : nodes_) n.grad = TensorT();
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  /// Recomputes every non-leaf node from its recorded forward rule, in order.
  void replay() {
    for (auto& n : nodes_) {
      if (!n.is_leaf()) n.owned = n.forward(*this);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

 private:
  void check_owned(VarT v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw std::invalid_argument("tape: variable does not belong to this tape");
    }
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;
using TapeD = BasicTape<double>;
using VarD = BasicVar<double>;

}  // namespace o2mag
