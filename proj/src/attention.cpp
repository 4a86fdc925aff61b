#include "nmt/attention.hpp"

#include <cmath>
#include <limits>

#include "nmt/error.hpp"

namespace nmt {

namespace {

Tensor as_row(const Tensor& v) {
  if (v.rank() == 1) return reshape(v, {1, v.dim(0)});
  if (v.rank() == 2 && v.dim(0) == 1) return v;
  throw DimensionError("expected a vector, got " + shape_str(v.shape()));
}

constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

}  // namespace

AttentionParams AttentionParams::init(std::size_t decoder_size, std::size_t encoder_size, std::size_t align_size,
                                      std::mt19937_64& rng) {
  AttentionParams p;
  p.W_a = Tensor::uniform({align_size, decoder_size}, std::sqrt(1.0 / static_cast<Real>(decoder_size)), rng);
  p.U_a = Tensor::uniform({align_size, encoder_size}, std::sqrt(1.0 / static_cast<Real>(encoder_size)), rng);
  p.v_a = Tensor::uniform({align_size}, std::sqrt(1.0 / static_cast<Real>(align_size)), rng);
  return p;
}

AttentionParams AttentionParams::zeros(std::size_t decoder_size, std::size_t encoder_size, std::size_t align_size) {
  return {Tensor::zeros({align_size, decoder_size}, true), Tensor::zeros({align_size, encoder_size}, true),
          Tensor::zeros({align_size}, true)};
}

std::size_t AttentionParams::count(std::size_t decoder_size, std::size_t encoder_size, std::size_t align_size) {
  return align_size * decoder_size + align_size * encoder_size + align_size;
}

bool is_row_stochastic(const AttentionMatrix& m, Real tol) {
  for (const auto& row : m.weights) {
    Real total = 0;
    for (Real w : row) {
      if (!(w >= 0.0 && w <= 1.0)) return false;
      total += w;
    }
    if (std::abs(total - 1.0) > tol) return false;
  }
  return true;
}

Tensor align_score(const Tensor& decoder_state, const Tensor& encoder_state, const AttentionParams& params) {
  const Tensor t = as_row(decoder_state);
  const Tensor h = as_row(encoder_state);
  if (t.dim(1) != params.W_a.dim(1) || h.dim(1) != params.U_a.dim(1)) {
    throw DimensionError("align_score: states " + shape_str(t.shape()) + "/" + shape_str(h.shape()) +
                         " vs W_a " + shape_str(params.W_a.shape()) + ", U_a " + shape_str(params.U_a.shape()));
  }
  const Tensor hidden = tanh(add(matmul_bt(t, params.W_a), matmul_bt(h, params.U_a)));
  return reshape(matmul_bt(hidden, reshape(params.v_a, {1, params.v_a.numel()})), {1});
}

Tensor attention_weights(const Tensor& scores) {
  if (scores.rank() == 1) return softmax(scores, 0);
  if (scores.rank() == 2) return softmax(scores, 1);
  throw DimensionError("attention_weights: scores must be a row or a matrix, got " + shape_str(scores.shape()));
}

Tensor context_vector(const Tensor& weights, const Tensor& states) {
  if (states.rank() != 2 || weights.numel() != states.dim(0)) {
    throw DimensionError("context_vector: " + std::to_string(weights.numel()) + " weights for states " +
                         shape_str(states.shape()));
  }
  return reshape(matmul(reshape(weights, {1, weights.numel()}), states), {states.dim(1)});
}

CellState attended_step(const Tensor& embedding, const CellState& previous, const Tensor& context,
                        const CellParams& decoder_cell) {
  if (decoder_cell.kind != CellKind::kGru) throw ContractError("attended_step expects a GRU decoder cell");
  if (embedding.rank() != 2 || context.rank() != 2 || embedding.dim(0) != context.dim(0)) {
    throw DimensionError("attended_step: embedding " + shape_str(embedding.shape()) + " and context " +
                         shape_str(context.shape()) + " must be [batch x width]");
  }
  return gru_step(concat({embedding, context}, 1), previous, decoder_cell);
}

AdditiveAttention::AdditiveAttention(const AttentionParams& params, const Tensor& encoder_states,
                                     std::vector<std::uint8_t> source_mask)
    : params_(params), states_(encoder_states) {
  if (encoder_states.rank() != 3) {
    throw DimensionError("encoder states must be [batch, positions, width], got " + shape_str(encoder_states.shape()));
  }
  batch_ = encoder_states.dim(0);
  positions_ = encoder_states.dim(1);
  width_ = encoder_states.dim(2);
  if (width_ != params.U_a.dim(1)) {
    throw DimensionError("encoder width " + std::to_string(width_) + " vs U_a " + shape_str(params.U_a.shape()));
  }
  if (source_mask.empty()) source_mask.assign(batch_ * positions_, 1);
  if (source_mask.size() != batch_ * positions_) throw DimensionError("source mask size mismatch");
  blocked_.resize(source_mask.size());
  for (std::size_t i = 0; i < source_mask.size(); ++i) blocked_[i] = source_mask[i] ? 0 : 1;
  for (std::size_t b = 0; b < batch_; ++b) {
    bool any = false;
    for (std::size_t s = 0; s < positions_; ++s) any = any || source_mask[b * positions_ + s];
    if (!any) throw ContractError("attention row " + std::to_string(b) + " has no visible source position");
  }
  keys_ = matmul_bt(reshape(encoder_states, {batch_ * positions_, width_}), params.U_a);
  repeat_index_.reserve(batch_ * positions_);
  for (std::size_t b = 0; b < batch_; ++b) {
    for (std::size_t s = 0; s < positions_; ++s) repeat_index_.push_back(static_cast<int>(b));
  }
}

std::pair<Tensor, Tensor> AdditiveAttention::attend(const Tensor& decoder_state) const {
  if (decoder_state.rank() != 2 || decoder_state.dim(0) != batch_ || decoder_state.dim(1) != params_.W_a.dim(1)) {
    throw DimensionError("attend: decoder state " + shape_str(decoder_state.shape()) + " vs W_a " +
                         shape_str(params_.W_a.shape()));
  }
  const Tensor query = gather_rows(matmul_bt(decoder_state, params_.W_a), repeat_index_);  // [B*S, A]
  const Tensor hidden = tanh(add(query, keys_));
  const Tensor scores = reshape(matmul_bt(hidden, reshape(params_.v_a, {1, params_.v_a.numel()})), {batch_, positions_});
  const Tensor weights = softmax(masked_fill(scores, blocked_, kNegInf), 1);
  const Tensor context = reshape(bmm(reshape(weights, {batch_, 1, positions_}), states_), {batch_, width_});
  return {weights, context};
}

}  // namespace nmt
