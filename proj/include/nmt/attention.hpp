#pragma once

#include <random>
#include <string>
#include <vector>

#include "nmt/recurrent.hpp"
#include "nmt/tensor.hpp"

namespace nmt {

/// Additive alignment parameters: score(t, h) = v_a . tanh(W_a t + U_a h).
struct AttentionParams {
  Tensor W_a;  // [align x decoder]
  Tensor U_a;  // [align x encoder]
  Tensor v_a;  // [align]

  static AttentionParams init(std::size_t decoder_size, std::size_t encoder_size, std::size_t align_size,
                              std::mt19937_64& rng);
  static AttentionParams zeros(std::size_t decoder_size, std::size_t encoder_size, std::size_t align_size);
  static std::size_t count(std::size_t decoder_size, std::size_t encoder_size, std::size_t align_size);
};

/// Attention weights over one target sentence, with the tokens on each axis.
struct AttentionMatrix {
  std::vector<std::vector<Real>> weights;  // [target][source]
  std::vector<std::string> target_tokens;
  std::vector<std::string> source_tokens;
  std::string label;

  std::size_t rows() const { return weights.size(); }
  std::size_t cols() const { return weights.empty() ? 0 : weights.front().size(); }
};

/// True when every row sums to 1 within `tol` and all entries lie in [0, 1].
bool is_row_stochastic(const AttentionMatrix& m, Real tol = 1e-6);

/// Scalar alignment score for one decoder state and one encoder state (vectors).
Tensor align_score(const Tensor& decoder_state, const Tensor& encoder_state, const AttentionParams& params);

/// Softmax over source positions of one row of scores ([positions] or [batch x positions]).
Tensor attention_weights(const Tensor& scores);

/// sum_i weights[i] * states[i]; weights [positions], states [positions x width].
Tensor context_vector(const Tensor& weights, const Tensor& states);

/// GRU step whose input is [embedding ; context].
CellState attended_step(const Tensor& embedding, const CellState& previous, const Tensor& context,
                        const CellParams& decoder_cell);

/// Batched additive attention over a fixed set of encoder states.
///
/// Encoder states are laid out [batch, positions, width]; keys U_a h are
/// computed once and reused for every decoder step.
class AdditiveAttention {
 public:
  AdditiveAttention(const AttentionParams& params, const Tensor& encoder_states,
                    std::vector<std::uint8_t> source_mask);

  /// Returns (weights [batch x positions], context [batch x width]) for decoder states [batch x decoder].
  std::pair<Tensor, Tensor> attend(const Tensor& decoder_state) const;

  std::size_t batch() const { return batch_; }
  std::size_t positions() const { return positions_; }

 private:
  const AttentionParams& params_;
  Tensor states_;  // [batch, positions, width]
  Tensor keys_;    // [batch*positions, align]
  std::vector<std::uint8_t> blocked_;
  std::vector<int> repeat_index_;
  std::size_t batch_;
  std::size_t positions_;
  std::size_t width_;
};

}  // namespace nmt
