#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace msdm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// Copies are shallow: two Tensor values can name the same storage, which is
/// how parameters are shared between a network, an optimizer and an adapter.
/// Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  // Rejects non-finite values and size mismatches.
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access, for initialisation and optimizer updates only.
  std::span<double> mutable_data() { return impl_->data; }
  const double* ptr() const { return impl_->data.data(); }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();  // allocates zeros on first use
  void zero_grad();                  // keeps the buffer, fills with 0
  void clear_grad();                 // drops the buffer

  Tensor clone() const;       // deep copy, no grad, requires_grad preserved
  Tensor detach() const;      // deep copy, requires_grad off
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

/// Define-by-run record of differentiable operations.
///
/// Ops append to the tape installed by the innermost TapeScope on the current
/// thread. With no active tape nothing is recorded and outputs never require
/// grad, which is the inference path. backward() walks records in exact
/// reverse order of recording.
class Tape {
 public:
  using BackwardFn = std::function<void(const TensorImpl& out)>;

  struct Record {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn);
  // Seeds d(loss)/d(loss) = 1 and propagates. loss must be a scalar.
  void backward(const Tensor& loss);
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<Record> records_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (e.g. evaluation inside a training step).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Accumulates g into t's gradient buffer if t participates in autodiff.
void accumulate_grad(const Tensor& t, std::span<const double> g);

void check_finite(std::span<const double> values, const char* where);

}  // namespace msdm
