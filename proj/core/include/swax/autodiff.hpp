#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>

#include "swax/tensor.hpp"

namespace swax {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid until the tape is cleared.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order; backward() replays
/// the registered adjoints in reverse. One tape per thread; clear() between steps.
template <typename T>
class Tape {
 public:
  /// Adjoint of one recorded op: receives the output gradient and accumulates
  /// into its inputs via accumulate()/grad_buffer().
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var<T>(this, nodes_.size() - 1);
  }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op result. The adjoint is retained only when some input tracks
  /// gradients. Non-finite outputs are rejected with the op name.
  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                Backward backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string(op) + ": non-finite output");
    }
    bool track = false;
    for (const auto& in : inputs) track = track || requires_grad(in.id());
    nodes_.push_back(Node{std::move(value), {}, track, track ? std::move(backward) : Backward{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  /// True if any of `inputs` tracks gradients; ops use it to skip saving
  /// forward intermediates during inference.
  bool any_requires_grad(std::initializer_list<Var<T>> inputs) const {
    for (const auto& in : inputs) {
      if (requires_grad(in.id())) return true;
    }
    return false;
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of node `id`, zero-initialised on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(std::size_t id, std::span<const T> g) {
    if (!requires_grad(id)) return;
    Tensor<T>& buf = grad_buffer(id);
    if (g.size() != buf.size()) {
      throw ShapeError("Tape::accumulate: gradient of " + std::to_string(g.size()) +
                       " values for node of shape " + shape_to_string(buf.shape()));
    }
    T* dst = buf.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  /// Gradient of a node after backward(); zeros when the node was unreachable.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.size() == n.value.size()) return n.grad;
    return Tensor<T>(n.value.shape());
  }

  void backward(const Var<T>& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (value(loss.id()).size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_to_string(value(loss.id()).shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (!requires_grad(loss.id())) return;
    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() != n.value.size()) continue;
      n.backward(*this, n.grad);
    }
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };
  // deque: references to earlier nodes stay valid across appends.
  std::deque<Node> nodes_;
};

}  // namespace swax
