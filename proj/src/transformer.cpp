#include "nmt/transformer.hpp"

#include <cmath>
#include <limits>

#include "nmt/error.hpp"

namespace nmt {

namespace {

constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), tile_rows(b, x.dim(0)));
}

/// [batch*len x d] -> [batch*heads, len, d/H]
Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t len, std::size_t heads) {
  const std::size_t d = x.dim(1);
  const std::size_t dh = d / heads;
  return reshape(permute(reshape(x, {batch, len, heads, dh}), {0, 2, 1, 3}), {batch * heads, len, dh});
}

/// [batch*heads, len, d/H] -> [batch*len x d]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t len, std::size_t heads) {
  const std::size_t dh = x.dim(2);
  return reshape(permute(reshape(x, {batch, heads, len, dh}), {0, 2, 1, 3}), {batch * len, heads * dh});
}

Tensor normalize(const Tensor& x, const NormParams& norm, const BlockOptions& options) {
  return options.layer_norm ? layer_norm(x, norm.gain, norm.bias) : x;
}

Tensor residual(const Tensor& x, const Tensor& branch, const BlockOptions& options) {
  if (options.training && options.residual_dropout > 0.0 && options.rng == nullptr) {
    throw ContractError("residual dropout in training mode needs a random generator");
  }
  std::mt19937_64 unused;
  return add(x, dropout(branch, options.residual_dropout, options.training, options.rng ? *options.rng : unused));
}

void check_width(const Tensor& x, std::size_t d, const char* what) {
  if (x.rank() != 2 || x.dim(1) != d) {
    throw DimensionError(std::string(what) + ": input " + shape_str(x.shape()) + " needs width " + std::to_string(d));
  }
}

}  // namespace

// ---- masks ----------------------------------------------------------------

MaskSpec MaskSpec::none(std::size_t batch, std::size_t queries, std::size_t keys) {
  MaskSpec m;
  m.kind = Kind::kNone;
  m.batch = batch;
  m.queries = queries;
  m.keys = keys;
  m.allowed.assign(batch * queries * keys, 1);
  return m;
}

MaskSpec MaskSpec::causal(std::size_t batch, std::size_t length) {
  MaskSpec m = none(batch, length, length);
  m.kind = Kind::kCausal;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < length; ++q) {
      for (std::size_t k = q + 1; k < length; ++k) m.allowed[(b * length + q) * length + k] = 0;
    }
  }
  return m;
}

MaskSpec MaskSpec::padding(std::span<const std::uint8_t> key_mask, std::size_t batch, std::size_t queries,
                           std::size_t keys) {
  if (key_mask.size() != batch * keys) throw DimensionError("padding mask must be [batch x keys]");
  MaskSpec m = none(batch, queries, keys);
  m.kind = Kind::kPadding;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < queries; ++q) {
      for (std::size_t k = 0; k < keys; ++k) m.allowed[(b * queries + q) * keys + k] = key_mask[b * keys + k];
    }
  }
  return m;
}

MaskSpec MaskSpec::causal_padding(std::span<const std::uint8_t> key_mask, std::size_t batch, std::size_t length) {
  MaskSpec m = padding(key_mask, batch, length, length);
  m.kind = Kind::kCausalPadding;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < length; ++q) {
      for (std::size_t k = q + 1; k < length; ++k) m.allowed[(b * length + q) * length + k] = 0;
    }
  }
  return m;
}

// ---- parameters -----------------------------------------------------------

MultiHeadParams MultiHeadParams::zeros(std::size_t d, std::size_t heads) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  MultiHeadParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.Wq.push_back(Tensor::zeros({d, dh}, true));
    p.Wk.push_back(Tensor::zeros({d, dh}, true));
    p.Wv.push_back(Tensor::zeros({d, dh}, true));
    p.bq.push_back(Tensor::zeros({dh}, true));
    p.bk.push_back(Tensor::zeros({dh}, true));
    p.bv.push_back(Tensor::zeros({dh}, true));
  }
  p.Wo = Tensor::zeros({d, d}, true);
  p.bo = Tensor::zeros({d}, true);
  return p;
}

MultiHeadParams MultiHeadParams::init(std::size_t d, std::size_t heads, std::mt19937_64& rng) {
  MultiHeadParams p = zeros(d, heads);
  const Real bound = std::sqrt(1.0 / static_cast<Real>(d));
  for (std::size_t h = 0; h < heads; ++h) {
    p.Wq[h] = Tensor::uniform(p.Wq[h].shape(), bound, rng);
    p.Wk[h] = Tensor::uniform(p.Wk[h].shape(), bound, rng);
    p.Wv[h] = Tensor::uniform(p.Wv[h].shape(), bound, rng);
  }
  p.Wo = Tensor::uniform({d, d}, bound, rng);
  return p;
}

FeedForwardParams FeedForwardParams::zeros(std::size_t d, std::size_t d_ff) {
  return {Tensor::zeros({d, d_ff}, true), Tensor::zeros({d_ff}, true), Tensor::zeros({d_ff, d}, true),
          Tensor::zeros({d}, true)};
}

FeedForwardParams FeedForwardParams::init(std::size_t d, std::size_t d_ff, std::mt19937_64& rng) {
  FeedForwardParams p = zeros(d, d_ff);
  p.W1 = Tensor::uniform({d, d_ff}, std::sqrt(1.0 / static_cast<Real>(d)), rng);
  p.W2 = Tensor::uniform({d_ff, d}, std::sqrt(1.0 / static_cast<Real>(d_ff)), rng);
  return p;
}

NormParams NormParams::identity(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }

TransformerBlockParams TransformerBlockParams::init(std::size_t d, std::size_t heads, std::size_t d_ff,
                                                    std::mt19937_64& rng) {
  return {MultiHeadParams::init(d, heads, rng), FeedForwardParams::init(d, d_ff, rng), NormParams::identity(d),
          NormParams::identity(d)};
}

TransformerBlockParams TransformerBlockParams::zeros(std::size_t d, std::size_t heads, std::size_t d_ff) {
  return {MultiHeadParams::zeros(d, heads), FeedForwardParams::zeros(d, d_ff), NormParams::identity(d),
          NormParams::identity(d)};
}

std::size_t TransformerBlockParams::count(std::size_t d, std::size_t d_ff) {
  return 4 * d * d + 2 * d * d_ff + 4 * d + (d_ff + d) + 2 * (2 * d);
}

DecoderBlockParams DecoderBlockParams::init(std::size_t d, std::size_t heads, std::size_t d_ff, std::mt19937_64& rng) {
  DecoderBlockParams p;
  p.self_attention = MultiHeadParams::init(d, heads, rng);
  p.cross_attention = MultiHeadParams::init(d, heads, rng);
  p.feed_forward = FeedForwardParams::init(d, d_ff, rng);
  p.norm_self = NormParams::identity(d);
  p.norm_cross = NormParams::identity(d);
  p.norm_feed_forward = NormParams::identity(d);
  return p;
}

DecoderBlockParams DecoderBlockParams::zeros(std::size_t d, std::size_t heads, std::size_t d_ff) {
  DecoderBlockParams p;
  p.self_attention = MultiHeadParams::zeros(d, heads);
  p.cross_attention = MultiHeadParams::zeros(d, heads);
  p.feed_forward = FeedForwardParams::zeros(d, d_ff);
  p.norm_self = NormParams::identity(d);
  p.norm_cross = NormParams::identity(d);
  p.norm_feed_forward = NormParams::identity(d);
  return p;
}

std::size_t DecoderBlockParams::count(std::size_t d, std::size_t d_ff) {
  return 8 * d * d + 2 * d * d_ff + 8 * d + (d_ff + d) + 3 * (2 * d);
}

// ---- operations -----------------------------------------------------------

Tensor positional_encoding(std::size_t length, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ConfigError("positional encoding width must be even, got " + std::to_string(d));
  std::vector<Real> pe(length * d);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const Real angle = static_cast<Real>(pos) / std::pow(10000.0, static_cast<Real>(2 * i) / static_cast<Real>(d));
      pe[pos * d + 2 * i] = std::sin(angle);
      pe[pos * d + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from({length, d}, std::move(pe));
}

std::pair<Tensor, Tensor> scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                               const MaskSpec& mask, std::size_t heads, Real dropout_rate,
                                               bool training, std::mt19937_64* rng) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0) ||
      q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1)) {
    throw DimensionError("scaled_dot_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
  }
  const std::size_t n = q.dim(0), tq = q.dim(1), tk = k.dim(1);
  if (heads == 0 || n % heads != 0 || mask.batch * heads != n || mask.queries != tq || mask.keys != tk) {
    throw DimensionError("scaled_dot_attention: mask [" + std::to_string(mask.batch) + "x" +
                         std::to_string(mask.queries) + "x" + std::to_string(mask.keys) + "] does not cover " +
                         std::to_string(n) + " heads of " + std::to_string(tq) + "x" + std::to_string(tk));
  }
  std::vector<std::uint8_t> blocked(n * tq * tk);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t b = s / heads;
    for (std::size_t m = 0; m < tq; ++m) {
      bool any = false;
      for (std::size_t j = 0; j < tk; ++j) {
        const bool ok = mask.allows(b, m, j);
        any = any || ok;
        blocked[(s * tq + m) * tk + j] = ok ? 0 : 1;
      }
      if (!any) throw ContractError("attention query " + std::to_string(m) + " cannot see any key");
    }
  }
  const Real inv_scale = 1.0 / std::sqrt(static_cast<Real>(q.dim(2)));
  const Tensor scores = masked_fill(scale(bmm(q, k, true), inv_scale), blocked, kNegInf);
  const Tensor weights = softmax(scores, 2);
  Tensor used = weights;
  if (training && dropout_rate > 0.0) {
    if (!rng) throw ContractError("attention dropout in training mode needs a random generator");
    used = dropout(weights, dropout_rate, true, *rng);
  }
  return {bmm(used, v), weights};
}

Tensor multi_head_attention(const Tensor& queries_in, const Tensor& keys_in, const MultiHeadParams& params,
                            const MaskSpec& mask, const BlockOptions& options) {
  const std::size_t heads = params.heads();
  const std::size_t d = params.Wo.dim(0);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  check_width(queries_in, d, "multi_head_attention");
  check_width(keys_in, d, "multi_head_attention");
  const std::size_t batch = mask.batch, tq = mask.queries, tk = mask.keys;
  if (queries_in.dim(0) != batch * tq || keys_in.dim(0) != batch * tk) {
    throw DimensionError("multi_head_attention: inputs " + shape_str(queries_in.shape()) + "/" +
                         shape_str(keys_in.shape()) + " do not match mask batch " + std::to_string(batch));
  }
  const Tensor q = linear(queries_in, concat(params.Wq, 1), concat(params.bq, 0));
  const Tensor k = linear(keys_in, concat(params.Wk, 1), concat(params.bk, 0));
  const Tensor v = linear(keys_in, concat(params.Wv, 1), concat(params.bv, 0));
  auto [heads_out, weights] =
      scaled_dot_attention(split_heads(q, batch, tq, heads), split_heads(k, batch, tk, heads),
                           split_heads(v, batch, tk, heads), mask, heads, options.attention_dropout,
                           options.training, options.rng);
  if (options.attention_trace) options.attention_trace->push_back(weights);
  return linear(merge_heads(heads_out, batch, tq, heads), params.Wo, params.bo);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params) {
  return linear(relu(linear(x, params.W1, params.b1)), params.W2, params.b2);
}

Tensor transformer_block(const Tensor& x, const TransformerBlockParams& params, const MaskSpec& mask,
                         const BlockOptions& options) {
  check_width(x, params.attention.Wo.dim(0), "transformer_block");
  const Tensor normed = normalize(x, params.norm_attention, options);
  const Tensor after_attention = residual(x, multi_head_attention(normed, normed, params.attention, mask, options), options);
  return residual(after_attention,
                  feed_forward(normalize(after_attention, params.norm_feed_forward, options), params.feed_forward),
                  options);
}

Tensor decoder_block(const Tensor& x, const Tensor& memory, const DecoderBlockParams& params,
                     const MaskSpec& self_mask, const MaskSpec& cross_mask, const BlockOptions& options) {
  check_width(x, params.self_attention.Wo.dim(0), "decoder_block");
  BlockOptions self_options = options;
  self_options.attention_trace = nullptr;
  const Tensor normed = normalize(x, params.norm_self, options);
  const Tensor h1 =
      residual(x, multi_head_attention(normed, normed, params.self_attention, self_mask, self_options), options);
  const Tensor h2 = residual(
      h1, multi_head_attention(normalize(h1, params.norm_cross, options), memory, params.cross_attention, cross_mask,
                               options),
      options);
  return residual(h2, feed_forward(normalize(h2, params.norm_feed_forward, options), params.feed_forward), options);
}

}  // namespace nmt
