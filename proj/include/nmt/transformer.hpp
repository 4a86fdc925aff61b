#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nmt/tensor.hpp"

namespace nmt {

/// Which query/key pairs may interact.
///
/// `allowed` is [batch x queries x keys]; a causal grid lets query m see key
/// n only when n <= m, a padding grid hides PAD keys.
struct MaskSpec {
  enum class Kind { kNone, kCausal, kPadding, kCausalPadding };

  Kind kind = Kind::kNone;
  std::size_t batch = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> allowed;

  static MaskSpec none(std::size_t batch, std::size_t queries, std::size_t keys);
  static MaskSpec causal(std::size_t batch, std::size_t length);
  /// key_mask is [batch x keys] with 1 for real tokens.
  static MaskSpec padding(std::span<const std::uint8_t> key_mask, std::size_t batch, std::size_t queries,
                          std::size_t keys);
  static MaskSpec causal_padding(std::span<const std::uint8_t> key_mask, std::size_t batch, std::size_t length);

  bool allows(std::size_t b, std::size_t m, std::size_t n) const {
    return allowed[(b * queries + m) * keys + n] != 0;
  }
};

/// Per-head query/key/value projections (d -> d/H) and the output map.
struct MultiHeadParams {
  std::vector<Tensor> Wq, Wk, Wv;  // H x [d x d/H]
  std::vector<Tensor> bq, bk, bv;  // H x [d/H]
  Tensor Wo;                       // [d x d]
  Tensor bo;                       // [d]

  static MultiHeadParams init(std::size_t d, std::size_t heads, std::mt19937_64& rng);
  static MultiHeadParams zeros(std::size_t d, std::size_t heads);
  std::size_t heads() const { return Wq.size(); }
};

struct FeedForwardParams {
  Tensor W1, b1;  // [d x d_ff], [d_ff]
  Tensor W2, b2;  // [d_ff x d], [d]

  static FeedForwardParams init(std::size_t d, std::size_t d_ff, std::mt19937_64& rng);
  static FeedForwardParams zeros(std::size_t d, std::size_t d_ff);
};

struct NormParams {
  Tensor gain, bias;

  static NormParams identity(std::size_t d);
};

struct TransformerBlockParams {
  MultiHeadParams attention;
  FeedForwardParams feed_forward;
  NormParams norm_attention, norm_feed_forward;

  static TransformerBlockParams init(std::size_t d, std::size_t heads, std::size_t d_ff, std::mt19937_64& rng);
  static TransformerBlockParams zeros(std::size_t d, std::size_t heads, std::size_t d_ff);
  /// 4d^2 + 2 d d_ff + projection biases (4d) + FFN biases (d_ff + d) + norms (4d).
  static std::size_t count(std::size_t d, std::size_t d_ff);
};

struct DecoderBlockParams {
  MultiHeadParams self_attention;
  MultiHeadParams cross_attention;
  FeedForwardParams feed_forward;
  NormParams norm_self, norm_cross, norm_feed_forward;

  static DecoderBlockParams init(std::size_t d, std::size_t heads, std::size_t d_ff, std::mt19937_64& rng);
  static DecoderBlockParams zeros(std::size_t d, std::size_t heads, std::size_t d_ff);
  static std::size_t count(std::size_t d, std::size_t d_ff);
};

/// Runtime switches shared by all blocks of one forward pass.
struct BlockOptions {
  std::size_t heads = 1;
  Real attention_dropout = 0.0;
  Real residual_dropout = 0.0;
  bool training = false;
  bool layer_norm = true;
  std::mt19937_64* rng = nullptr;
  /// When set, each attention call appends its weights [batch*heads, queries, keys].
  std::vector<Tensor>* attention_trace = nullptr;
};

/// Sinusoidal encoding: sin(pos / 10000^(2i/d)) on even dims, cos on odd.
Tensor positional_encoding(std::size_t length, std::size_t d);

/// softmax(q k^T / sqrt(d_head)) v over [N, queries, d_head] heads, where N
/// is batch*heads and mask rows repeat per head. Returns (output, weights).
std::pair<Tensor, Tensor> scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                               const MaskSpec& mask, std::size_t heads, Real dropout = 0.0,
                                               bool training = false, std::mt19937_64* rng = nullptr);

/// Heads attend separately; outputs are concatenated in head order and
/// projected. `queries_in` is [batch*queries x d], `keys_in` [batch*keys x d].
Tensor multi_head_attention(const Tensor& queries_in, const Tensor& keys_in, const MultiHeadParams& params,
                            const MaskSpec& mask, const BlockOptions& options);

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params);

/// x + Dropout(Sublayer(Norm(x))) for self-attention then feed-forward.
Tensor transformer_block(const Tensor& x, const TransformerBlockParams& params, const MaskSpec& mask,
                         const BlockOptions& options);

/// Masked self-attention, cross-attention over `memory`, feed-forward.
Tensor decoder_block(const Tensor& x, const Tensor& memory, const DecoderBlockParams& params,
                     const MaskSpec& self_mask, const MaskSpec& cross_mask, const BlockOptions& options);

}  // namespace nmt
