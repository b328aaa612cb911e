#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace l2ae {

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t index = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode differentiation tape.
///
/// Values are appended in execution order, so reverse index order is a reverse
/// topological order. Only nodes that depend on a gradient-requiring leaf keep
/// a backward closure. A tape supports exactly one backward pass; build a new
/// tape for every forward pass.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient (inputs, targets, frozen weights).
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, true, {}); }

  /// Trainable leaf; after backward its gradient has the value's shape.
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, true, {}); }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(check(v)).value; }

  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }

  const Tensor<T>& grad(Var<T> v) const {
    const auto& node = nodes_.at(check(v));
    if (!backward_done_) throw UsageError("gradient requested before backward");
    if (!node.requires_grad) throw UsageError("gradient requested for a constant");
    return node.grad;
  }

  /// Gradient accumulator of node `i`, zero-initialized on first use.
  Tensor<T>& grad_buffer(std::size_t i) {
    auto& node = nodes_[i];
    if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape(), T{0});
    return node.grad;
  }

  /// Records an op output. The closure is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward, const char* op = "") {
    bool needs = false;
    std::vector<std::size_t> ids;
    for (auto in : inputs) {
      needs = needs || nodes_.at(check(in)).requires_grad;
      ids.push_back(in.index);
    }
    auto v = push(std::move(value), needs, false, needs ? std::move(backward) : Backward{});
    nodes_.back().op = op;
    nodes_.back().inputs = std::move(ids);
    return v;
  }

  /// Op tag of node `i` ("" for leaves and untagged ops).
  const char* op(std::size_t i) const { return nodes_.at(i).op; }
  const std::vector<std::size_t>& inputs(std::size_t i) const { return nodes_.at(i).inputs; }
  const Tensor<T>& value_at(std::size_t i) const { return nodes_.at(i).value; }

  void backward(Var<T> root) {
    const std::size_t r = check(root);
    if (backward_done_) throw UsageError("backward already ran on this tape; record a new forward pass");
    if (nodes_[r].value.size() != 1)
      throw UsageError("backward root must be a scalar, got shape " + shape_str(nodes_[r].value.shape()));
    backward_done_ = true;
    if (nodes_[r].requires_grad) {
      grad_buffer(r)[0] = T{1};
      for (std::size_t i = r + 1; i-- > 0;) {
        auto& node = nodes_[i];
        if (!node.backward || node.grad.empty()) continue;
        node.backward(*this, node.grad);
        node.backward = nullptr;
      }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].trainable) grad_buffer(i);
  }

  bool backward_done() const { return backward_done_; }
  std::size_t size() const { return nodes_.size(); }

  std::size_t check(Var<T> v) const {
    if (v.tape != this) throw UsageError("variable belongs to a different tape");
    return v.index;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool trainable = false;
    Backward backward;
    const char* op = "";
    std::vector<std::size_t> inputs;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, bool leaf, Backward backward) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.trainable = leaf && requires_grad;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  // deque keeps references to earlier values stable while ops append.
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <class T>
Tape<T>& same_tape(std::initializer_list<Var<T>> vars) {
  Tape<T>* tape = vars.begin()->tape;
  for (auto v : vars)
    if (v.tape != tape || tape == nullptr) throw UsageError("operands recorded on different tapes");
  return *tape;
}

}  // namespace detail

}  // namespace l2ae
