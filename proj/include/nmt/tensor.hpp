#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace nmt {

/// Scalar type for all model math. Gradient checks rely on 64-bit precision.
using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;

  void ensure_grad();
};

/// Dense row-major array with optional participation in the gradient tape.
///
/// A Tensor is a cheap handle; copies share storage. Values are treated as
/// immutable once an op has consumed them, except for parameters that the
/// optimizer updates between steps.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);
  static Tensor uniform(Shape shape, Real bound, std::mt19937_64& rng, bool requires_grad = true);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  bool requires_grad() const { return impl_->requires_grad; }

  std::span<const Real> data() const { return impl_->data; }
  /// Direct write access, for parameter updates and test perturbations only.
  std::span<Real> mutable_data() { return impl_->data; }
  /// Gradient buffer; zero-filled if backward has not reached this tensor.
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  Real item() const;
  Real operator[](std::size_t flat) const { return impl_->data[flat]; }
  Real at(std::size_t row, std::size_t col) const;

  /// Deep copy detached from the tape.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations.
///
/// Each thread owns one active tape. Ops append to it when any input
/// requires a gradient and recording is enabled; `backward` replays the
/// records in reverse exactly once and then clears the tape.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Record {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, BackwardFn backward);
  void backward(const Tensor& loss);
  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }
  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

 private:
  std::vector<Record> records_;
  bool enabled_ = true;
};

Tape& active_tape();

/// Disables tape recording for the lifetime of the guard (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(active_tape().enabled()) { active_tape().set_enabled(false); }
  ~NoGradGuard() { active_tape().set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Runs reverse accumulation from a scalar loss on the active tape.
void backward(const Tensor& loss);

// ---- differentiable operations ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_bt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T
/// Batched product over the leading axis: [N,m,k]x[N,k,n], or [N,m,k]x[N,n,k]^T.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
Tensor add_scalar(const Tensor& x, Real value);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x);  // last axis

/// Mean negative log-probability of `targets` under row-wise softmax of
/// `logits`, over positions where `mask` is true. Returns 0 when the mask
/// is empty.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask);

/// Inverted dropout. Identity when `training` is false or `rate` is 0.
Tensor dropout(const Tensor& x, Real rate, bool training, std::mt19937_64& rng);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // rank 2
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Rows of `table` ([n,d]) selected by `ids`; ids out of range raise IndexError.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// Repeats a length-n vector (or [1,n] row) into an [rows,n] matrix.
Tensor tile_rows(const Tensor& vec, std::size_t rows);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Replaces entries where `mask` is true by `value`; no gradient flows there.
Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, Real value);
/// Normalizes each row of the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = 1e-5);

}  // namespace nmt
