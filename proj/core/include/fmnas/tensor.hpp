#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmnas/errors.hpp"
#include "fmnas/rng.hpp"

namespace fmnas {

template <typename S>
class GradTapeT;

inline std::size_t numel_of(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor with an optional gradient buffer. The handle has
/// shared-ownership value semantics: copying a TensorT aliases the same
/// storage, clone() copies it. Once a tensor participates in a recorded op
/// its data must not be mutated until the tape is reset.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape)
      : p_(std::make_shared<Impl>()) {
    validate_shape(shape);
    p_->shape = std::move(shape);
    p_->data.assign(numel_of(p_->shape), S(0));
  }

  TensorT(std::vector<int> shape, std::vector<S> data)
      : p_(std::make_shared<Impl>()) {
    validate_shape(shape);
    if (numel_of(shape) != data.size())
      throw ShapeError(detail::msg("tensor data length ", data.size(),
                                   " does not match shape ", shape_str(shape)));
    p_->shape = std::move(shape);
    p_->data = std::move(data);
  }

  static TensorT full(std::vector<int> shape, S value) {
    TensorT t(std::move(shape));
    for (auto& v : t.p_->data) v = value;
    return t;
  }

  static TensorT scalar(S value) { return TensorT({1}, {value}); }

  bool defined() const { return p_ != nullptr; }

  const std::vector<int>& shape() const { return p_->shape; }
  int dim(int i) const { return p_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(p_->shape.size()); }
  std::size_t numel() const { return p_->data.size(); }

  std::span<S> data() { return {p_->data.data(), p_->data.size()}; }
  std::span<const S> data() const { return {p_->data.data(), p_->data.size()}; }

  S item() const {
    if (numel() != 1)
      throw ValueError(detail::msg("item() on tensor of shape ", shape_str(p_->shape)));
    return p_->data[0];
  }

  bool requires_grad() const { return p_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    p_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !p_->grad.empty(); }

  /// Grad buffer, allocated zero-filled on first use.
  std::span<S> ensure_grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->data.size(), S(0));
    return {p_->grad.data(), p_->grad.size()};
  }

  std::span<const S> grad() const {
    if (p_->grad.empty())
      throw ValueError("grad() called on a tensor with no gradient");
    return {p_->grad.data(), p_->grad.size()};
  }

  void clear_grad() { p_->grad.clear(); }

  /// Deep copy of shape+data (grad is not copied; requires_grad carries over).
  TensorT clone() const {
    TensorT t(p_->shape, p_->data);
    t.p_->requires_grad = p_->requires_grad;
    return t;
  }

  bool same_storage(const TensorT& other) const { return p_ == other.p_; }

  // Tape bookkeeping, used by record_op / backward.
  void mark_recorded(GradTapeT<S>* tape, std::uint64_t epoch) {
    p_->requires_grad = true;
    p_->tape = tape;
    p_->epoch = epoch;
  }
  GradTapeT<S>* tape() const { return p_->tape; }
  std::uint64_t epoch() const { return p_->epoch; }

 private:
  struct Impl {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;
    bool requires_grad = false;
    GradTapeT<S>* tape = nullptr;
    std::uint64_t epoch = 0;
  };

  static void validate_shape(const std::vector<int>& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (int d : shape)
      if (d <= 0)
        throw ShapeError(detail::msg("tensor shape ", shape_str(shape),
                                     " has a non-positive dimension"));
  }

  std::shared_ptr<Impl> p_;
};

/// Reverse-mode tape: an append-only list of recorded ops, replayed backwards
/// from a scalar loss. One tape per worker; reset() invalidates everything
/// recorded so far (epoch bump) and re-arms backward().
template <typename S>
class GradTapeT {
 public:
  GradTapeT() = default;
  GradTapeT(const GradTapeT&) = delete;
  GradTapeT& operator=(const GradTapeT&) = delete;

  std::uint64_t epoch() const { return epoch_; }
  std::size_t size() const { return nodes_.size(); }

  void record(TensorT<S> output, std::function<void()> back) {
    nodes_.push_back(Node{std::move(output), std::move(back)});
  }

  void reset() {
    nodes_.clear();
    ++epoch_;
    ran_backward_ = false;
  }

  void run_backward(const TensorT<S>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ValueError("backward requires a defined scalar loss");
    if (loss.tape() != this)
      throw ValueError("backward: loss was not recorded on this tape");
    if (loss.epoch() != epoch_)
      throw ValueError(detail::msg("backward: stale tape epoch ", loss.epoch(),
                                   " (tape is at ", epoch_, "); reset happened after this loss"));
    if (ran_backward_)
      throw ValueError("backward already ran for this tape epoch; call reset() first");
    ran_backward_ = true;

    TensorT<S> seed = loss;
    seed.ensure_grad()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output.has_grad()) it->back();
    }
  }

 private:
  struct Node {
    TensorT<S> output;
    std::function<void()> back;
  };

  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
  bool ran_backward_ = false;
};

template <typename S>
inline GradTapeT<S>*& active_tape() {
  thread_local GradTapeT<S>* tape = nullptr;
  return tape;
}

/// RAII scope making `tape` the active recording target on this thread.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(GradTapeT<S>& tape) : prev_(active_tape<S>()) {
    active_tape<S>() = &tape;
  }
  ~TapeScope() { active_tape<S>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTapeT<S>* prev_;
};

/// Record `out = f(inputs...)` on the active tape if any input needs a
/// gradient. `back` is the reverse rule; it must accumulate (+=) into the
/// inputs' grad buffers via ensure_grad().
template <typename S, typename F>
inline void record_op(std::initializer_list<TensorT<S>> inputs, TensorT<S>& out, F&& back) {
  GradTapeT<S>* tape = active_tape<S>();
  if (tape == nullptr) return;
  bool needed = false;
  for (const auto& t : inputs)
    if (t.defined() && t.requires_grad()) {
      needed = true;
      break;
    }
  if (!needed) return;
  out.mark_recorded(tape, tape->epoch());
  tape->record(out, std::forward<F>(back));
}

/// Populate gradients of every reachable requires_grad tensor from a scalar
/// loss. Rejects non-scalar losses, losses from a stale tape epoch and
/// repeated calls without reset().
template <typename S>
inline void backward(const TensorT<S>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ValueError("backward requires a defined scalar loss");
  GradTapeT<S>* tape = loss.tape();
  if (tape == nullptr)
    throw ValueError("backward: loss is not attached to a tape (was it recorded?)");
  tape->run_backward(loss);
}

/// Gaussian-initialized tensor (used for weight init; not recorded).
template <typename S>
inline TensorT<S> randn(std::vector<int> shape, Rng& rng, double stddev) {
  TensorT<S> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<S>(rng.normal() * stddev);
  return t;
}

using Tensor = TensorT<float>;
using GradTape = GradTapeT<float>;

}  // namespace fmnas
