#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ovseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class GradTape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const GradTape* tape = nullptr;  // tape that produced this tensor, if any

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major 64-bit tensor.
///
/// A Tensor is a handle: copies share storage and gradient. That identity is
/// what lets the tape route gradients back to parameters. Use clone() for an
/// independent copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Mutating a tensor already recorded on a tape invalidates that tape.
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double at(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->shape[1] + j]; }
  double& at(std::size_t i, std::size_t j) { return impl_->data[i * impl_->shape[1] + j]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Zero-filled span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy with no gradient and no tape membership.
  Tensor clone() const;
  /// Same values, detached from any tape and not requiring grad.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  detail::TensorImpl& impl() const { return *impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of executed differentiable operations.
///
/// Ops record onto the tape installed by the innermost TapeScope on the
/// calling thread. A tape and its tensors belong to one thread.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  void record(const Tensor& output, std::function<void()> backward_fn);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  /// Throws ContractError if loss is not a scalar produced on this tape.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
};

/// Installs a tape as the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

/// Suspends recording on the current thread.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape* previous_;
};

GradTape* active_tape();

}  // namespace ovseg
