#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ctncf/error.hpp"
#include "ctncf/tensor.hpp"

namespace ctncf {

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
  friend bool operator==(Var, Var) = default;
};

/// Reverse-mode operation tape.
///
/// Values are appended in execution order; backward() walks the records in
/// reverse, so each op's backward closure runs exactly once and only after
/// every consumer of its output has deposited its gradient contribution.
///
/// Parameters enter via param(), which references the caller's tensor without
/// copying it. Their gradients accumulate on the tape and are read back with
/// grad(const Tensor&). The referenced tensors must outlive the tape.
///
/// A tape built with record=false computes values only. Nothing is kept for
/// the backward pass, which makes it the cheap path for scoring.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var out)>;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value) {
    return push_node(Node{std::move(value), nullptr, {}, false, {}});
  }

  Var param(const Tensor& tensor) {
    for (const auto& [ptr, var] : params_) {
      if (ptr == &tensor) return var;
    }
    Var v = push_node(Node{Tensor{}, &tensor, {}, record_, {}});
    params_.emplace_back(&tensor, v);
    return v;
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Record an op output. `fn` is dropped unless some input needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    if (record_) {
      for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    }
    return push_node(
        Node{std::move(value), nullptr, {}, needs, needs ? std::move(fn) : BackwardFn{}});
  }

  Var push(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    if (record_) {
      for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    }
    return push_node(
        Node{std::move(value), nullptr, {}, needs, needs ? std::move(fn) : BackwardFn{}});
  }

  /// Gradient buffer of `v`, allocated (zeroed) on first access.
  std::span<double> grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad.assign(value(v).size(), 0.0);
    return n.grad;
  }

  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  /// Accumulated gradient of a parameter; empty if it never reached the loss.
  std::span<const double> grad(const Tensor& param) const {
    for (const auto& [ptr, var] : params_) {
      if (ptr == &param) return nodes_[var.id].grad;
    }
    return {};
  }

  void backward(Var loss, double seed = 1.0) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (nodes_.empty()) throw std::logic_error("backward on an empty tape");
    if (backward_done_) {
      throw std::logic_error("backward called twice without reset()");
    }
    if (value(loss).size() != 1) {
      throw ShapeError("backward expects a scalar loss, got " +
                       shape_str(value(loss).shape()));
    }
    backward_done_ = true;
    grad(loss)[0] += seed;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.fn && !n.grad.empty()) n.fn(*this, Var{static_cast<std::uint32_t>(i)});
    }
  }

  void reset() {
    nodes_.clear();
    params_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref;
    std::vector<double> grad;
    bool requires_grad;
    BackwardFn fn;
  };

  Var push_node(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  bool record_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<std::pair<const Tensor*, Var>> params_;
};

}  // namespace ctncf
