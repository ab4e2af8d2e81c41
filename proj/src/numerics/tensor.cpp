#include "ovseg/numerics/tensor.hpp"

#include <algorithm>

#include "ovseg/errors.hpp"

namespace ovseg {

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) { impl_->shape = {}; impl_->data = {0.0}; }

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  for (std::size_t d : shape)
    if (d == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
  for (std::size_t d : shape)
    if (d == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data); }

void GradTape::record(const Tensor& output, std::function<void()> backward_fn) {
  output.impl().tape = this;
  nodes_.push_back({output.impl_ptr(), std::move(backward_fn)});
}

void GradTape::backward(const Tensor& loss) {
  if (loss.size() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (loss.impl().tape != this) throw ContractError("backward(): loss was not produced on this tape");
  loss.impl().ensure_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    it->backward_fn();
  }
}

TapeScope::TapeScope(GradTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

GradTape* active_tape() { return g_active_tape; }

}  // namespace ovseg
