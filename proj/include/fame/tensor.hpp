#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fame/errors.hpp"

namespace fame {

/// NCHW extent. Lower-rank data uses trailing ones, e.g. a gate vector is (N, E, 1, 1).
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t numel() const noexcept { return n * c * h * w; }
  std::size_t plane() const noexcept { return h * w; }
  std::size_t sample() const noexcept { return c * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
  }
};

/// Debug-mode NaN/Inf detection on every op output. On by default in builds without NDEBUG.
inline bool& finite_checks() {
#ifdef NDEBUG
  thread_local bool enabled = false;
#else
  thread_local bool enabled = true;
#endif
  return enabled;
}

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::uint64_t id = detail::next_node_id();

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Shared handle to a dense NCHW array. Copies alias the same storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(shape, T(0), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = shape;
    t.node_->value.assign(shape.numel(), fill);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape.numel()) {
      throw ShapeError("tensor of shape " + shape.str() + " needs " + std::to_string(shape.numel()) +
                       " values, got " + std::to_string(values.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = shape;
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return full(Shape{}, v, requires_grad); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::uint64_t id() const { return node_->id; }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access; only for leaves (parameters, optimizer updates, test fixtures).
  std::span<T> mutable_values() { return node_->value; }
  const T* data() const { return node_->value.data(); }

  bool requires_grad() const { return defined() && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return defined() && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
    return node_->value[0];
  }

  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = shape();
    return node_->value[((n * s.c + c) * s.h + h) * s.w + w];
  }

  /// Copy of the values with no gradient history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  TensorNode<T>& node() const { return *node_; }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <class T>
struct TapeEntry {
  const char* op;
  std::vector<std::uint64_t> inputs;
  std::uint64_t output;
  std::function<void()> backward;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Ops record onto the tape that is active on the calling thread. A tape is confined to one
/// thread; independent training contexts use independent tapes.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (slot() == this) slot() = nullptr;
  }

  class Scope {
   public:
    explicit Scope(Tape* tape) : previous_(slot()) { slot() = tape; }
    ~Scope() { slot() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  [[nodiscard]] Scope activate() { return Scope(this); }
  static Tape* active() { return slot(); }

  void record(const char* op, std::vector<std::uint64_t> inputs, std::uint64_t output,
              std::function<void()> backward) {
    entries_.push_back(TapeEntry<T>{op, std::move(inputs), output, std::move(backward)});
  }

  /// Reverse-mode sweep from a scalar loss, then clears the tape.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? loss.shape().str() : std::string("<undefined>")));
    }
    if (entries_.empty()) throw ContractError("backward() called on an empty tape");
    loss.node().ensure_grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    clear();
  }

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<TapeEntry<T>>& entries() const { return entries_; }

 private:
  static Tape*& slot() {
    thread_local Tape* current = nullptr;
    return current;
  }

  std::vector<TapeEntry<T>> entries_;
};

/// Runs backward on the tape active on this thread.
template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

namespace detail {

template <class T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->requires_grad()) return true;
  }
  return false;
}

template <class T>
bool needs_grad(std::span<const Tensor<T>> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const Tensor<T>& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

/// Registers `fn(grad_out)` as the backward rule producing `out`. The rule only runs if some
/// downstream op actually propagated a gradient into `out`.
template <class T, class Fn>
void record(const char* op, std::vector<std::uint64_t> inputs, Tensor<T>& out, Fn fn) {
  out.set_requires_grad(true);
  auto out_node = out.node_ptr();
  Tape<T>::active()->record(op, std::move(inputs), out.id(), [out_node, fn = std::move(fn)]() {
    if (out_node->grad.empty()) return;
    fn(std::span<const T>(out_node->grad));
  });
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks()) return;
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t.values()[i])) {
      throw NumericError(std::string("non-finite value produced by ") + op + " at flat index " +
                         std::to_string(i) + " of shape " + t.shape().str());
    }
  }
}

template <class T>
std::span<T> grad_of(const Tensor<T>& t) {
  return t.node().ensure_grad();
}

}  // namespace detail
}  // namespace fame
