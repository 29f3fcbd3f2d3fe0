#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "leafgrad/error.hpp"

namespace leafgrad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Opt-in NaN/Inf screening of every op output; enabled by the test suites.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t tape_serial = 0;  // 0 when not produced on a tape
  std::size_t node_index = 0;
};

}  // namespace detail

// Dense row-major array with an optional gradient slot. A Tensor is a shared
// handle: copies alias the same storage, clone() makes an independent copy.
// Images use N x C x H x W, features N x F.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const T> grad() const { return impl_->grad; }
  // Allocates a zero gradient on first use. Const because a Tensor is a
  // handle; gradient slots are written through captured handles in backward.
  std::span<T> grad_mut() const;
  void zero_grad();
  void drop_grad() { impl_->grad.clear(); }

  // Fresh storage holding a copy of the values; no gradient, not on a tape.
  Tensor clone() const;
  Tensor detach() const { return clone(); }

  // Changes extents in place; element count must be preserved. Only for
  // tensors that are not on a tape.
  void reshape_inplace(Shape shape);

  bool on_tape() const { return impl_ && impl_->tape_serial != 0; }
  std::uint64_t tape_serial() const { return impl_->tape_serial; }
  std::size_t node_index() const { return impl_->node_index; }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Append-only record of differentiable operations. Backward replays the
// nodes in strict reverse append order, so a node's inputs always precede it.
template <typename T>
class Tape {
 public:
  static constexpr std::size_t leaf = static_cast<std::size_t>(-1);

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;  // node indices, or `leaf`
    std::shared_ptr<detail::TensorImpl<T>> output;
    std::function<void()> backward;
  };

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  std::uint64_t serial() const { return serial_; }

  void record(std::string op, std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and propagates. Intermediate gradients are
  // recomputed from scratch on every call; leaf gradients accumulate until
  // zero_grad(), so two calls without a reset double the leaf gradients.
  void backward(const Tensor<T>& loss);

  // Drops all nodes; tensors produced earlier are detached from the tape.
  void reset();

  static Tape* active();
  static void set_active(Tape* tape);

 private:
  std::vector<Node> nodes_;
  std::uint64_t serial_;
};

// Installs a tape as the thread's recording target for its lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope();

 private:
  Tape<T>* previous_;
};

// Backward through the currently active tape.
template <typename T>
void backward(const Tensor<T>& loss);

namespace detail {

// Active tape when at least one input wants a gradient, otherwise nullptr.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs);

template <typename T>
void check_finite(const Tensor<T>& t, const char* op);

}  // namespace detail

}  // namespace leafgrad
