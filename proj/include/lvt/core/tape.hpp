#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lvt/core/error.hpp"
#include "lvt/core/tensor.hpp"

namespace lvt {

/// A named trainable tensor that outlives any single tape. Gradients from
/// every tape that references it accumulate into `grad`.
template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<S> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

  void zero_grad() { grad = Tensor<S>(value.shape()); }
};

template <class S>
class Tape;

/// Handle to a value recorded on a Tape.
template <class S>
class Var {
 public:
  Var() = default;
  Var(Tape<S>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<S>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape<S>& tape() const {
    if (!tape_) throw TapeError("use of an unbound Var");
    return *tape_;
  }
  bool requires_grad() const;
  bool bound() const { return tape_ != nullptr; }

 private:
  Tape<S>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of executed ops. Ids are assigned in execution order, so the
/// record is topologically sorted by construction and backward is a single
/// reverse sweep.
template <class S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<S>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Tensor<S> value) { return push("constant", std::move(value), false, {}, nullptr); }

  // A free variable that receives a gradient readable through grad().
  Var<S> leaf(Tensor<S> value) { return push("leaf", std::move(value), true, {}, nullptr); }

  Var<S> param(Parameter<S>& p) {
    Var<S> v = push(p.name.c_str(), p.value, p.trainable, {}, nullptr);
    if (p.trainable) nodes_[v.id()].param = &p;
    return v;
  }

  // Records an op output. `fn` is kept only if some input requires a gradient.
  Var<S> record(const char* op, Tensor<S> value, std::initializer_list<Var<S>> inputs,
                BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw TapeError(std::string(op) + ": input from another tape");
      rg = rg || nodes_[in.id()].requires_grad;
    }
    return push(op, std::move(value), rg, inputs, rg ? std::move(fn) : nullptr);
  }

  const Tensor<S>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Adds g into the gradient slot of v, allocating it on first use.
  void accumulate_grad(const Var<S>& v, const Tensor<S>& g) {
    Node& n = nodes_.at(v.id());
    if (!n.requires_grad) return;
    if (n.grad.empty()) n.grad = Tensor<S>(n.value.shape());
    accumulate(n.grad, g);
  }

  // Mutable gradient slot for ops that scatter into it directly. Returns
  // nullptr when v does not require a gradient.
  Tensor<S>* grad_slot(const Var<S>& v) {
    Node& n = nodes_.at(v.id());
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<S>(n.value.shape());
    return &n.grad;
  }

  /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
  /// Parameter::grad. A tape supports exactly one backward pass.
  void backward(const Var<S>& loss) {
    if (consumed_) throw TapeError("backward called twice on the same recording (stale tape)");
    if (&loss.tape() != this) throw TapeError("loss recorded on another tape");
    const Tensor<S>& lv = loss.value();
    if (lv.size() != 1) throw TapeError("backward requires a scalar loss, got " + shape_str(lv.shape()));
    if (!lv.all_finite()) throw NumericError("backward on non-finite loss");
    consumed_ = true;
    Node& root = nodes_[loss.id()];
    if (!root.requires_grad) return;
    root.grad = Tensor<S>(lv.shape(), S{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) accumulate(n.param->grad, n.grad);
    }
  }

  // Gradient of the last backward pass w.r.t. v; zeros if v did not participate.
  Tensor<S> grad(const Var<S>& v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad.empty() ? Tensor<S>(n.value.shape()) : n.grad;
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<S>* param = nullptr;
  };

  Var<S> push(const char* op, Tensor<S> value, bool rg, std::initializer_list<Var<S>>, BackwardFn fn) {
    if (consumed_) throw TapeError(std::string(op) + ": recording on a tape after backward (stale tape)");
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    nodes_.push_back(Node{std::move(value), Tensor<S>(), rg, std::move(fn), nullptr});
    return Var<S>(this, nodes_.size() - 1);
  }

  // deque keeps element references stable while ops append.
  std::deque<Node> nodes_;
  bool consumed_ = false;
};

template <class S>
const Tensor<S>& Var<S>::value() const {
  return tape().value(id_);
}

template <class S>
bool Var<S>::requires_grad() const {
  return tape().requires_grad(id_);
}

}  // namespace lvt
