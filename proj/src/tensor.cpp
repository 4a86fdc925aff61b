#include "nmt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "nmt/error.hpp"

namespace nmt {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<Real> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

bool tracks(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape().enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Wraps an op result and, when any input is tracked, records its backward rule.
template <typename Fn>
Tensor finish(std::shared_ptr<TensorImpl> out, std::initializer_list<const Tensor*> inputs,
              Fn&& backward_rule) {
  if (tracks(inputs)) {
    out->requires_grad = true;
    std::vector<std::shared_ptr<TensorImpl>> deps;
    deps.reserve(inputs.size());
    for (const Tensor* t : inputs) deps.push_back(t->impl());
    active_tape().record(std::move(deps), out, std::forward<Fn>(backward_rule));
  }
  return Tensor(std::move(out));
}

Tensor finish_many(std::shared_ptr<TensorImpl> out, const std::vector<Tensor>& inputs,
                   Tape::BackwardFn backward_rule) {
  bool any = false;
  if (active_tape().enabled()) {
    for (const auto& t : inputs) any = any || t.requires_grad();
  }
  if (any) {
    out->requires_grad = true;
    std::vector<std::shared_ptr<TensorImpl>> deps;
    for (const auto& t : inputs) deps.push_back(t.impl());
    active_tape().record(std::move(deps), out, std::move(backward_rule));
  }
  return Tensor(std::move(out));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

bool is_scalar(const Tensor& t) { return t.numel() == 1 && t.rank() <= 1; }

/// Splits `shape` around `axis` into (outer, extent, inner).
struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = !same && is_scalar(a);
  const bool b_scalar = !same && is_scalar(b);
  if (!same && !a_scalar && !b_scalar) {
    throw DimensionError(std::string(name) + ": shape " + shape_str(a.shape()) +
                         " does not match " + shape_str(b.shape()));
  }
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  const auto& ad = a.impl()->data;
  const auto& bd = b.impl()->data;
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real x = ad[a_scalar ? 0 : i];
    const Real y = bd[b_scalar ? 0 : i];
    switch (kind) {
      case Binary::kAdd: out[i] = x + y; break;
      case Binary::kSub: out[i] = x - y; break;
      case Binary::kMul: out[i] = x * y; break;
    }
  }
  auto impl = new_impl(out_shape, std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return finish(impl, {&a, &b}, [o, pa, pb, kind, a_scalar, b_scalar, n] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const Real g = kind == Binary::kMul ? o->grad[i] * pb->data[b_scalar ? 0 : i] : o->grad[i];
        pa->grad[a_scalar ? 0 : i] += g;
      }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        Real g = o->grad[i];
        if (kind == Binary::kSub) g = -g;
        if (kind == Binary::kMul) g *= pa->data[a_scalar ? 0 : i];
        pb->grad[b_scalar ? 0 : i] += g;
      }
    }
  });
}

template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df_from_out_and_in) {
  const auto& xd = x.impl()->data;
  std::vector<Real> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  auto impl = new_impl(x.shape(), std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* px = x.impl().get();
  return finish(impl, {&x}, [o, px, df_from_out_and_in] {
    px->ensure_grad();
    for (std::size_t i = 0; i < o->data.size(); ++i) {
      px->grad[i] += o->grad[i] * df_from_out_and_in(o->data[i], px->data[i]);
    }
  });
}

Real stable_sigmoid(Real v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const Real e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<Real> data, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  auto impl = new_impl(std::move(shape), std::move(data));
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->ensure_grad();
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::uniform(Shape shape, Real bound, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<Real> dist(-bound, bound);
  std::vector<Real> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

std::span<const Real> Tensor::grad() const {
  impl_->ensure_grad();
  return impl_->grad;
}

std::span<Real> Tensor::mutable_grad() {
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Real Tensor::at(std::size_t row, std::size_t col) const {
  require_rank(*this, 2, "at");
  return impl_->data.at(row * dim(1) + col);
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

// ---- tape -----------------------------------------------------------------

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                  std::shared_ptr<TensorImpl> output, BackwardFn backward) {
  records_.push_back({std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not connected to any tensor requiring a gradient");
  }
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  records_.clear();
}

Tape& active_tape() {
  thread_local Tape tape;
  return tape;
}

void backward(const Tensor& loss) { active_tape().backward(loss); }

// ---- products -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ between " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  auto impl = new_impl({m, n}, std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return finish(impl, {&a, &b}, [o, pa, pb, m, k, n] {
    MapC go(o->grad.data(), m, n);
    if (pa->requires_grad) {
      pa->ensure_grad();
      Map(pa->grad.data(), m, k).noalias() += go * MapC(pb->data.data(), k, n).transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      Map(pb->grad.data(), k, n).noalias() += MapC(pa->data.data(), m, k).transpose() * go;
    }
  });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_bt");
  require_rank(b, 2, "matmul_bt");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_bt: inner extents differ between " + shape_str(a.shape()) +
                         " and transposed " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<Real> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), n, k).transpose();
  auto impl = new_impl({m, n}, std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return finish(impl, {&a, &b}, [o, pa, pb, m, k, n] {
    MapC go(o->grad.data(), m, n);
    if (pa->requires_grad) {
      pa->ensure_grad();
      Map(pa->grad.data(), m, k).noalias() += go * MapC(pb->data.data(), n, k);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      Map(pb->grad.data(), n, k).noalias() += go.transpose() * MapC(pa->data.data(), m, k);
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k) {
    throw DimensionError("bmm: shape " + shape_str(a.shape()) + " incompatible with " +
                         shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
  }
  std::vector<Real> out(batch * m * n);
  for (std::size_t s = 0; s < batch; ++s) {
    MapC as(a.data().data() + s * m * k, m, k);
    Map os(out.data() + s * m * n, m, n);
    if (transpose_b) {
      os.noalias() = as * MapC(b.data().data() + s * n * k, n, k).transpose();
    } else {
      os.noalias() = as * MapC(b.data().data() + s * k * n, k, n);
    }
  }
  auto impl = new_impl({batch, m, n}, std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return finish(impl, {&a, &b}, [o, pa, pb, batch, m, k, n, transpose_b] {
    if (pa->requires_grad) pa->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (std::size_t s = 0; s < batch; ++s) {
      MapC go(o->grad.data() + s * m * n, m, n);
      MapC as(pa->data.data() + s * m * k, m, k);
      if (transpose_b) {
        MapC bs(pb->data.data() + s * n * k, n, k);
        if (pa->requires_grad) Map(pa->grad.data() + s * m * k, m, k).noalias() += go * bs;
        if (pb->requires_grad) Map(pb->grad.data() + s * n * k, n, k).noalias() += go.transpose() * as;
      } else {
        MapC bs(pb->data.data() + s * k * n, k, n);
        if (pa->requires_grad) Map(pa->grad.data() + s * m * k, m, k).noalias() += go * bs.transpose();
        if (pb->requires_grad) Map(pb->grad.data() + s * k * n, k, n).noalias() += as.transpose() * go;
      }
    }
  });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMul, "mul"); }

Tensor scale(const Tensor& x, Real factor) {
  return unary(x, [factor](Real v) { return v * factor; }, [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& x, Real value) {
  return unary(x, [value](Real v) { return v + value; }, [](Real, Real) { return 1.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](Real v) { return std::tanh(v); }, [](Real t, Real) { return 1.0 - t * t; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](Real s, Real) { return s * (1.0 - s); });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](Real v) { return v > 0 ? v : 0.0; }, [](Real, Real in) { return in > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](Real v) { return std::exp(v); }, [](Real e, Real) { return e; });
}

// ---- normalizations -------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  const AxisView v = axis_view(x.shape(), axis);
  const auto& xd = x.impl()->data;
  std::vector<Real> out(xd.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      Real top = -std::numeric_limits<Real>::infinity();
      for (std::size_t e = 0; e < v.extent; ++e) top = std::max(top, xd[base + e * v.inner]);
      Real total = 0;
      for (std::size_t e = 0; e < v.extent; ++e) {
        const Real w = std::exp(xd[base + e * v.inner] - top);
        out[base + e * v.inner] = w;
        total += w;
      }
      for (std::size_t e = 0; e < v.extent; ++e) out[base + e * v.inner] /= total;
    }
  }
  auto impl = new_impl(x.shape(), std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* px = x.impl().get();
  return finish(impl, {&x}, [o, px, v] {
    px->ensure_grad();
    for (std::size_t oo = 0; oo < v.outer; ++oo) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = oo * v.extent * v.inner + in;
        Real dot = 0;
        for (std::size_t e = 0; e < v.extent; ++e) {
          const std::size_t i = base + e * v.inner;
          dot += o->grad[i] * o->data[i];
        }
        for (std::size_t e = 0; e < v.extent; ++e) {
          const std::size_t i = base + e * v.inner;
          px->grad[i] += o->data[i] * (o->grad[i] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax on rank-0 tensor");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  const auto& xd = x.impl()->data;
  std::vector<Real> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xd.data() + r * width;
    const Real top = *std::max_element(row, row + width);
    Real total = 0;
    for (std::size_t c = 0; c < width; ++c) total += std::exp(row[c] - top);
    const Real lse = top + std::log(total);
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = row[c] - lse;
  }
  auto impl = new_impl(x.shape(), std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* px = x.impl().get();
  return finish(impl, {&x}, [o, px, rows, width] {
    px->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      Real gsum = 0;
      for (std::size_t c = 0; c < width; ++c) gsum += o->grad[r * width + c];
      for (std::size_t c = 0; c < width; ++c) {
        const std::size_t i = r * width + c;
        px->grad[i] += o->grad[i] - std::exp(o->data[i]) * gsum;
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), width = logits.dim(1);
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                         " mask entries");
  }
  std::size_t active = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++active;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= width) {
      throw IndexError("cross_entropy: target id " + std::to_string(targets[r]) + " outside vocabulary of size " +
                       std::to_string(width));
    }
  }
  const auto& xd = logits.impl()->data;
  std::vector<Real> probs(xd.size(), 0.0);
  Real loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const Real* row = xd.data() + r * width;
    const Real top = *std::max_element(row, row + width);
    Real total = 0;
    for (std::size_t c = 0; c < width; ++c) {
      probs[r * width + c] = std::exp(row[c] - top);
      total += probs[r * width + c];
    }
    for (std::size_t c = 0; c < width; ++c) probs[r * width + c] /= total;
    loss -= row[targets[r]] - top - std::log(total);
  }
  const Real denom = active ? static_cast<Real>(active) : 1.0;
  auto impl = new_impl({1}, {loss / denom});
  TensorImpl* o = impl.get();
  TensorImpl* px = logits.impl().get();
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return finish(impl, {&logits},
                [o, px, rows, width, denom, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk)] {
                  px->ensure_grad();
                  const Real g = o->grad[0] / denom;
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (!msk[r]) continue;
                    for (std::size_t c = 0; c < width; ++c) px->grad[r * width + c] += g * probs[r * width + c];
                    px->grad[r * width + tgt[r]] -= g;
                  }
                });
}

Tensor dropout(const Tensor& x, Real rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const Real factor = 1.0 / (1.0 - rate);
  std::vector<Real> gate(x.numel());
  for (auto& g : gate) g = keep(rng) ? factor : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(gate)));
}

// ---- layout ---------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto impl = new_impl(std::move(shape), x.impl()->data);
  TensorImpl* o = impl.get();
  TensorImpl* px = x.impl().get();
  return finish(impl, {&x}, [o, px] {
    px->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[i] += o->grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  return permute(x, {1, 0});
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) throw DimensionError("permute: order rank differs from " + shape_str(x.shape()));
  std::vector<bool> seen(rank, false);
  for (std::size_t a : order) {
    if (a >= rank || seen[a]) throw DimensionError("permute: invalid axis order");
    seen[a] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(order[i]);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // source flat index for every destination flat index
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < rank; ++i) s += idx[i] * in_strides[order[i]];
    src[flat] = s;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<Real> out(n);
  const auto& xd = x.impl()->data;
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[src[i]];
  auto impl = new_impl(std::move(out_shape), std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* px = x.impl().get();
  return finish(impl, {&x}, [o, px, src = std::move(src)] {
    px->ensure_grad();
    for (std::size_t i = 0; i < src.size(); ++i) px->grad[src[i]] += o->grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch " + shape_str(p.shape()));
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.dim(i) != first[i]) {
        throw DimensionError("concat: shape " + shape_str(p.shape()) + " does not match " + shape_str(first));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  const AxisView ov = axis_view(out_shape, axis);
  std::vector<Real> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * ov.inner;
    const auto& pd = p.impl()->data;
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(pd.data() + o * chunk, chunk, out.data() + o * ov.extent * ov.inner + offset * ov.inner);
    }
    offset += p.dim(axis);
  }
  auto impl = new_impl(out_shape, std::move(out));
  TensorImpl* o = impl.get();
  std::vector<TensorImpl*> ins;
  for (const auto& p : parts) ins.push_back(p.impl().get());
  return finish_many(impl, parts, [o, ins, offsets, ov] {
    for (std::size_t k = 0; k < ins.size(); ++k) {
      TensorImpl* p = ins[k];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      const std::size_t chunk = p->shape.size() ? p->data.size() / ov.outer : 0;
      for (std::size_t oo = 0; oo < ov.outer; ++oo) {
        const Real* g = o->grad.data() + oo * ov.extent * ov.inner + offsets[k] * ov.inner;
        Real* dst = p->grad.data() + oo * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
      }
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const AxisView v = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * v.inner;
  std::vector<Real> out(v.outer * chunk);
  const auto& xd = x.impl()->data;
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(xd.data() + o * v.extent * v.inner + begin * v.inner, chunk, out.data() + o * chunk);
  }
  auto impl = new_impl(std::move(out_shape), std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* px = x.impl().get();
  return finish(impl, {&x}, [o, px, v, begin, chunk] {
    px->ensure_grad();
    for (std::size_t oo = 0; oo < v.outer; ++oo) {
      Real* dst = px->grad.data() + oo * v.extent * v.inner + begin * v.inner;
      const Real* g = o->grad.data() + oo * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "gather_rows");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<Real> out(idx.size() * width);
  const auto& td = table.impl()->data;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= rows) {
      throw IndexError("token id " + std::to_string(idx[r]) + " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(td.data() + idx[r] * width, width, out.data() + r * width);
  }
  auto impl = new_impl({idx.size(), width}, std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* pt = table.impl().get();
  return finish(impl, {&table}, [o, pt, width, idx = std::move(idx)] {
    pt->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      Real* dst = pt->grad.data() + idx[r] * width;
      const Real* g = o->grad.data() + r * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += g[c];
    }
  });
}

Tensor tile_rows(const Tensor& vec, std::size_t rows) {
  if (!(vec.rank() == 1 || (vec.rank() == 2 && vec.dim(0) == 1))) {
    throw DimensionError("tile_rows: expected a vector, got " + shape_str(vec.shape()));
  }
  const std::size_t width = vec.numel();
  std::vector<Real> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(vec.data().data(), width, out.data() + r * width);
  auto impl = new_impl({rows, width}, std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* pv = vec.impl().get();
  return finish(impl, {&vec}, [o, pv, rows, width] {
    pv->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < width; ++c) pv->grad[c] += o->grad[r * width + c];
    }
  });
}

Tensor sum(const Tensor& x) {
  const auto& xd = x.impl()->data;
  const Real total = std::accumulate(xd.begin(), xd.end(), 0.0);
  auto impl = new_impl({1}, {total});
  TensorImpl* o = impl.get();
  TensorImpl* px = x.impl().get();
  return finish(impl, {&x}, [o, px] {
    px->ensure_grad();
    for (auto& g : px->grad) g += o->grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<Real>(x.numel())); }

Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, Real value) {
  if (mask.size() != x.numel()) {
    throw DimensionError("masked_fill: mask of " + std::to_string(mask.size()) + " entries for " +
                         shape_str(x.shape()));
  }
  std::vector<Real> out(x.impl()->data);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out[i] = value;
  }
  auto impl = new_impl(x.shape(), std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* px = x.impl().get();
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return finish(impl, {&x}, [o, px, m = std::move(m)] {
    px->ensure_grad();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) px->grad[i] += o->grad[i];
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  const std::size_t width = x.shape().back();
  if (gain.numel() != width || bias.numel() != width) {
    throw DimensionError("layer_norm: gain/bias of " + shape_str(gain.shape()) + " for input " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  const auto& xd = x.impl()->data;
  const auto& gd = gain.impl()->data;
  const auto& bd = bias.impl()->data;
  std::vector<Real> normed(xd.size()), inv_std(rows), out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xd.data() + r * width;
    Real mu = 0;
    for (std::size_t c = 0; c < width; ++c) mu += row[c];
    mu /= static_cast<Real>(width);
    Real var = 0;
    for (std::size_t c = 0; c < width; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<Real>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t i = r * width + c;
      normed[i] = (row[c] - mu) * inv_std[r];
      out[i] = normed[i] * gd[c] + bd[c];
    }
  }
  auto impl = new_impl(x.shape(), std::move(out));
  TensorImpl* o = impl.get();
  TensorImpl* px = x.impl().get();
  TensorImpl* pg = gain.impl().get();
  TensorImpl* pb = bias.impl().get();
  return finish(impl, {&x, &gain, &bias},
                [o, px, pg, pb, rows, width, normed = std::move(normed), inv_std = std::move(inv_std)] {
                  if (pg->requires_grad) pg->ensure_grad();
                  if (pb->requires_grad) pb->ensure_grad();
                  if (px->requires_grad) px->ensure_grad();
                  const Real w = static_cast<Real>(width);
                  for (std::size_t r = 0; r < rows; ++r) {
                    Real sum_g = 0, sum_gn = 0;
                    for (std::size_t c = 0; c < width; ++c) {
                      const std::size_t i = r * width + c;
                      const Real go = o->grad[i];
                      if (pg->requires_grad) pg->grad[c] += go * normed[i];
                      if (pb->requires_grad) pb->grad[c] += go;
                      const Real gn = go * pg->data[c];
                      sum_g += gn;
                      sum_gn += gn * normed[i];
                    }
                    if (!px->requires_grad) continue;
                    for (std::size_t c = 0; c < width; ++c) {
                      const std::size_t i = r * width + c;
                      const Real gn = o->grad[i] * pg->data[c];
                      px->grad[i] += inv_std[r] * (gn - sum_g / w - normed[i] * sum_gn / w);
                    }
                  }
                });
}

}  // namespace nmt
