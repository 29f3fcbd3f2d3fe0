#include "leafgrad/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace leafgrad {

namespace {

std::atomic<bool> g_finite_checks{false};
std::atomic<std::uint64_t> g_tape_serial{0};

template <typename T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) fail(ErrorKind::shape, "tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) fail(ErrorKind::shape, "tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  validate_shape(shape);
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size()) {
    fail(ErrorKind::shape, "shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                               " values, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) fail(ErrorKind::shape, "item() needs a single-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T{0});
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl_->shape, impl_->data);
}

template <typename T>
void Tensor<T>::reshape_inplace(Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != numel()) {
    fail(ErrorKind::shape, "cannot reshape " + shape_str(impl_->shape) + " to " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
}

template <typename T>
Tape<T>::Tape() : serial_(++g_tape_serial) {}

template <typename T>
Tape<T>::~Tape() {
  reset();
  if (active_slot<T>() == this) active_slot<T>() = nullptr;
}

template <typename T>
void Tape<T>::record(std::string op, std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& output,
                     std::function<void()> backward) {
  Node node;
  node.op = std::move(op);
  for (const Tensor<T>* in : inputs) {
    if (in == nullptr || !in->defined()) continue;
    node.inputs.push_back(in->on_tape() && in->tape_serial() == serial_ ? in->node_index() : leaf);
  }
  output.impl()->requires_grad = true;
  output.impl()->tape_serial = serial_;
  output.impl()->node_index = nodes_.size();
  node.output = output.impl();
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    fail(ErrorKind::shape, "backward() needs a scalar loss");
  }
  if (!loss.on_tape() || loss.tape_serial() != serial_) {
    fail(ErrorKind::state, "backward() loss was not produced on this tape");
  }
  for (auto& node : nodes_) node.output->grad.clear();
  const std::size_t last = loss.node_index();
  nodes_[last].output->grad.assign(1, T{1});
  for (std::size_t i = last + 1; i-- > 0;) {
    if (!nodes_[i].output->grad.empty()) nodes_[i].backward();
  }
}

template <typename T>
void Tape<T>::reset() {
  for (auto& node : nodes_) {
    node.output->tape_serial = 0;
    node.output->requires_grad = false;
  }
  nodes_.clear();
  serial_ = ++g_tape_serial;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot<T>();
}

template <typename T>
void Tape<T>::set_active(Tape* tape) {
  active_slot<T>() = tape;
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) {
  Tape<T>::set_active(&tape);
}

template <typename T>
TapeScope<T>::~TapeScope() {
  Tape<T>::set_active(previous_);
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) fail(ErrorKind::state, "backward() called with no active tape");
  tape->backward(loss);
}

namespace detail {

template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor<T>* in : inputs) {
    if (in != nullptr && in->defined() && in->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks_enabled()) return;
  for (T v : t.data()) {
    if (!std::isfinite(v)) fail(ErrorKind::value, std::string(op) + " produced a non-finite value");
  }
}

}  // namespace detail

#define LEAFGRAD_INSTANTIATE(T)                                                            \
  template class Tensor<T>;                                                                \
  template class Tape<T>;                                                                  \
  template class TapeScope<T>;                                                             \
  template void backward<T>(const Tensor<T>&);                                             \
  template Tape<T>* detail::recording_tape<T>(std::initializer_list<const Tensor<T>*>);    \
  template void detail::check_finite<T>(const Tensor<T>&, const char*);

LEAFGRAD_INSTANTIATE(float)
LEAFGRAD_INSTANTIATE(double)

}  // namespace leafgrad
