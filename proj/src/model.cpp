#include "nmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "nmt/error.hpp"
#include "nmt/recurrent.hpp"
#include "nmt/transformer.hpp"

namespace nmt {

// ---- configuration --------------------------------------------------------

Architecture parse_architecture(const std::string& name) {
  if (name == "seq2seq-lstm") return Architecture::kSeq2SeqLstm;
  if (name == "attn-gru") return Architecture::kAttnGru;
  if (name == "transformer") return Architecture::kTransformer;
  throw ConfigError("unknown architecture '" + name + "' (valid: seq2seq-lstm, attn-gru, transformer)");
}

std::string architecture_name(Architecture arch) {
  switch (arch) {
    case Architecture::kSeq2SeqLstm: return "seq2seq-lstm";
    case Architecture::kAttnGru: return "attn-gru";
    case Architecture::kTransformer: return "transformer";
  }
  return "?";
}

ModelConfig ModelConfig::defaults(Architecture arch) {
  ModelConfig c;
  c.arch = arch;
  c.d_model = 512;
  if (arch == Architecture::kTransformer) {
    c.encoder_layers = c.decoder_layers = 4;
    c.heads = 8;
    c.d_ff = 1024;
    c.attention_dropout = 0.1;
    c.residual_dropout = 0.1;
  } else {
    c.encoder_layers = c.decoder_layers = 2;
    c.dropout = 0.2;
  }
  return c;
}

void ModelConfig::validate() const {
  if (d_model == 0) throw ConfigError("d_model must be positive");
  if (encoder_layers == 0 || decoder_layers == 0) throw ConfigError("layer counts must be positive");
  if (source_vocab <= kNumSpecial || target_vocab <= kNumSpecial) {
    throw ConfigError("vocabulary sizes must exceed the " + std::to_string(kNumSpecial) + " reserved tokens");
  }
  for (double rate : {dropout, attention_dropout, residual_dropout}) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rates must lie in [0, 1)");
  }
  if (arch == Architecture::kTransformer) {
    if (heads == 0 || d_model % heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) +
                        " heads");
    }
    if (d_model % 2 != 0) throw ConfigError("transformer d_model must be even for positional encoding");
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
  }
}

std::string ModelConfig::to_manifest() const {
  std::ostringstream os;
  os << "arch = " << architecture_name(arch) << '\n'
     << "d_model = " << d_model << '\n'
     << "encoder_layers = " << encoder_layers << '\n'
     << "decoder_layers = " << decoder_layers << '\n'
     << "heads = " << heads << '\n'
     << "d_ff = " << d_ff << '\n'
     << "dropout = " << format_real(dropout) << '\n'
     << "attention_dropout = " << format_real(attention_dropout) << '\n'
     << "residual_dropout = " << format_real(residual_dropout) << '\n'
     << "source_vocab = " << source_vocab << '\n'
     << "target_vocab = " << target_vocab << '\n'
     << "max_decode_len = " << max_decode_len << '\n'
     << "tie_embeddings = " << (tie_embeddings ? "true" : "false") << '\n'
     << "layer_norm = " << (layer_norm ? "true" : "false") << '\n';
  return os.str();
}

void ModelConfig::apply(const KeyValues& kv) {
  auto size = [&](const char* key, std::size_t& field) {
    if (!kv.has(key)) return;
    const long long v = kv.get_int(key);
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    field = static_cast<std::size_t>(v);
  };
  if (kv.has("arch")) arch = parse_architecture(kv.get("arch"));
  size("d_model", d_model);
  if (kv.has("layers")) {
    size("layers", encoder_layers);
    decoder_layers = encoder_layers;
  }
  size("encoder_layers", encoder_layers);
  size("decoder_layers", decoder_layers);
  size("heads", heads);
  size("d_ff", d_ff);
  if (kv.has("dropout")) dropout = kv.get_double("dropout");
  if (kv.has("attention_dropout")) attention_dropout = kv.get_double("attention_dropout");
  if (kv.has("residual_dropout")) residual_dropout = kv.get_double("residual_dropout");
  size("source_vocab", source_vocab);
  size("target_vocab", target_vocab);
  size("max_decode_len", max_decode_len);
  if (kv.has("tie_embeddings")) tie_embeddings = kv.get_bool("tie_embeddings");
  if (kv.has("layer_norm")) layer_norm = kv.get_bool("layer_norm");
}

ModelConfig ModelConfig::from_manifest(const KeyValues& kv) {
  ModelConfig c = defaults(parse_architecture(kv.get("arch")));
  c.apply(kv);
  c.validate();
  return c;
}

// ---- parameter set --------------------------------------------------------

void ParameterSet::add(const std::string& name, const Tensor& tensor) {
  if (!index_.emplace(name, entries_.size()).second) throw ContractError("duplicate parameter name " + name);
  entries_.push_back({name, tensor});
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named " + name);
  return entries_[it->second].tensor;
}

std::size_t ParameterSet::count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void ParameterSet::assign(const std::vector<NamedTensor>& loaded) {
  if (loaded.size() != entries_.size()) {
    throw IoError("checkpoint holds " + std::to_string(loaded.size()) + " tensors, model expects " +
                  std::to_string(entries_.size()));
  }
  for (const auto& item : loaded) {
    auto it = index_.find(item.name);
    if (it == index_.end()) throw IoError("checkpoint tensor " + item.name + " is not a model parameter");
    Tensor& target = entries_[it->second].tensor;
    if (target.shape() != item.tensor.shape()) {
      throw IoError("checkpoint tensor " + item.name + " has shape " + shape_str(item.tensor.shape()) +
                    ", model expects " + shape_str(target.shape()));
    }
    std::copy(item.tensor.data().begin(), item.tensor.data().end(), target.mutable_data().begin());
  }
}

// ---- shared pieces --------------------------------------------------------

namespace {

std::mt19937_64& fallback_rng() {
  thread_local std::mt19937_64 rng(0);
  return rng;
}

Tensor drop(const Tensor& x, Real rate, const RunOptions& options) {
  if (!options.training || rate == 0.0) return x;
  if (!options.rng) throw ContractError("training-mode dropout needs a random generator");
  return dropout(x, rate, true, *options.rng);
}

std::vector<int> column(const std::vector<int>& matrix, std::size_t rows, std::size_t cols, std::size_t c) {
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = matrix[r * cols + c];
  return out;
}

/// [batch x width] 0/1 rows for position t, or an undefined tensor when every row is live.
Tensor keep_mask(const std::vector<std::uint8_t>& mask, std::size_t rows, std::size_t cols, std::size_t t,
                 std::size_t width) {
  bool all = true;
  for (std::size_t r = 0; r < rows; ++r) all = all && mask[r * cols + t];
  if (all) return {};
  std::vector<Real> data(rows * width);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(r * width), width, mask[r * cols + t] ? 1.0 : 0.0);
  return Tensor::from({rows, width}, std::move(data));
}

/// Stacks per-step [batch x V] logits into [batch, steps, V].
Tensor stack_steps(const std::vector<Tensor>& steps) {
  std::vector<Tensor> parts;
  parts.reserve(steps.size());
  for (const auto& s : steps) parts.push_back(reshape(s, {s.dim(0), 1, s.dim(1)}));
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

void check_ids(std::span<const int> ids, std::size_t vocab, const char* side) {
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError(std::string(side) + " token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
  }
}

void register_cell(ParameterSet& params, const std::string& prefix, const CellParams& cell) {
  for (const auto& [name, t] : cell.tensors) params.add(prefix + "." + name, t);
}

/// Single-row batch for an encoder input that already ends in EOS.
struct SourceRow {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
};

SourceRow source_row(const TokenIds& encoder_input) {
  if (encoder_input.empty()) throw ContractError("empty encoder input");
  return {encoder_input, std::vector<std::uint8_t>(encoder_input.size(), 1)};
}

/// Output projection with optional tied target embedding.
struct OutputLayer {
  Tensor weight;  // [V x d]
  Tensor bias;    // [V]

  Tensor operator()(const Tensor& h) const { return add(matmul_bt(h, weight), tile_rows(bias, h.dim(0))); }
};

// ---- sequence-to-sequence LSTM --------------------------------------------

class Seq2SeqLstm final : public Model {
 public:
  Seq2SeqLstm(const ModelConfig& config, std::mt19937_64& rng) : Model(config) {
    const std::size_t d = config.d_model;
    const Real bound = std::sqrt(1.0 / static_cast<Real>(d));
    src_embed_ = Tensor::uniform({config.source_vocab, d}, bound, rng);
    tgt_embed_ = Tensor::uniform({config.target_vocab, d}, bound, rng);
    params_.add("enc.embed", src_embed_);
    params_.add("dec.embed", tgt_embed_);
    for (std::size_t l = 0; l < config.encoder_layers; ++l) {
      enc_.push_back(CellParams::init(CellKind::kLstm, d, d, rng));
      register_cell(params_, "enc.layer" + std::to_string(l), enc_.back());
    }
    for (std::size_t l = 0; l < config.decoder_layers; ++l) {
      dec_.push_back(CellParams::init(CellKind::kLstm, d, d, rng));
      register_cell(params_, "dec.layer" + std::to_string(l), dec_.back());
    }
    out_.weight = config.tie_embeddings ? tgt_embed_ : Tensor::uniform({config.target_vocab, d}, bound, rng);
    out_.bias = Tensor::zeros({config.target_vocab}, true);
    if (!config.tie_embeddings) params_.add("out.W", out_.weight);
    params_.add("out.b", out_.bias);
  }

  Tensor forward(const Batch& batch, const RunOptions& options) const override {
    check_ids(batch.source, config_.source_vocab, "source");
    check_ids(batch.target, config_.target_vocab, "target");
    auto layers = encode(batch.source, batch.source_mask, batch.size, batch.source_len, options);
    const auto cells = prepare(dec_);
    std::vector<Tensor> logits;
    for (std::size_t t = 0; t + 1 < batch.target_len; ++t) {
      logits.push_back(decode_step(layers, column(batch.target, batch.size, batch.target_len, t), cells, options));
    }
    return stack_steps(logits);
  }

  std::unique_ptr<DecoderState> start(const TokenIds& encoder_input) const override {
    check_ids(encoder_input, config_.source_vocab, "source");
    const auto row = source_row(encoder_input);
    auto state = std::make_unique<State>();
    state->layers = encode(row.ids, row.mask, 1, row.ids.size(), RunOptions{});
    return state;
  }

  Tensor step(DecoderState& base, int token) const override {
    auto& state = dynamic_cast<State&>(base);
    const std::vector<int> ids{token};
    check_ids(ids, config_.target_vocab, "target");
    return decode_step(state.layers, ids, prepare(dec_), RunOptions{});
  }

  std::vector<AttentionMatrix> extract_attention(const TokenIds&, const TokenIds&) const override {
    throw UnsupportedArchitecture("architecture has no attention");
  }

 private:
  struct State final : DecoderState {
    std::vector<CellState> layers;
    std::unique_ptr<DecoderState> clone() const override { return std::make_unique<State>(*this); }
  };

  static std::vector<PreparedCell> prepare(const std::vector<CellParams>& cells) {
    std::vector<PreparedCell> out;
    for (const auto& c : cells) out.push_back(PreparedCell::from(c));
    return out;
  }

  /// Final (h, c) of every encoder layer; padding positions leave the state unchanged.
  std::vector<CellState> encode(const std::vector<int>& ids, const std::vector<std::uint8_t>& mask, std::size_t rows,
                                std::size_t cols, const RunOptions& options) const {
    const std::size_t d = config_.d_model;
    std::vector<Tensor> inputs, keep;
    for (std::size_t t = 0; t < cols; ++t) {
      inputs.push_back(drop(gather_rows(src_embed_, column(ids, rows, cols, t)), config_.dropout, options));
      keep.push_back(keep_mask(mask, rows, cols, t, d));
    }
    std::vector<CellState> finals;
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      const auto states = unroll(enc_[l], inputs, CellState::zeros(CellKind::kLstm, rows, d), Direction::kForward, &keep);
      finals.push_back(states.back());
      if (l + 1 < enc_.size()) {
        for (std::size_t t = 0; t < cols; ++t) inputs[t] = drop(states[t].h, config_.dropout, options);
      }
    }
    // decoder layer i starts from encoder layer i (the last encoder layer repeats if the decoder is deeper)
    std::vector<CellState> init;
    for (std::size_t l = 0; l < dec_.size(); ++l) init.push_back(finals[std::min(l, finals.size() - 1)]);
    return init;
  }

  Tensor decode_step(std::vector<CellState>& layers, const std::vector<int>& tokens,
                     const std::vector<PreparedCell>& cells, const RunOptions& options) const {
    Tensor x = drop(gather_rows(tgt_embed_, tokens), config_.dropout, options);
    for (std::size_t l = 0; l < cells.size(); ++l) {
      layers[l] = cell_step(x, layers[l], cells[l]);
      x = drop(layers[l].h, config_.dropout, options);
    }
    return out_(x);
  }

  Tensor src_embed_, tgt_embed_;
  std::vector<CellParams> enc_, dec_;
  OutputLayer out_;
};

// ---- attention GRU --------------------------------------------------------

class AttnGru final : public Model {
 public:
  AttnGru(const ModelConfig& config, std::mt19937_64& rng) : Model(config) {
    const std::size_t d = config.d_model;
    const Real bound = std::sqrt(1.0 / static_cast<Real>(d));
    src_embed_ = Tensor::uniform({config.source_vocab, d}, bound, rng);
    tgt_embed_ = Tensor::uniform({config.target_vocab, d}, bound, rng);
    params_.add("enc.embed", src_embed_);
    params_.add("dec.embed", tgt_embed_);
    for (std::size_t l = 0; l < config.encoder_layers; ++l) {
      const std::size_t in = l == 0 ? d : 2 * d;
      enc_fwd_.push_back(CellParams::init(CellKind::kGru, in, d, rng));
      enc_bwd_.push_back(CellParams::init(CellKind::kGru, in, d, rng));
      register_cell(params_, "enc.layer" + std::to_string(l) + ".fwd", enc_fwd_.back());
      register_cell(params_, "enc.layer" + std::to_string(l) + ".bwd", enc_bwd_.back());
    }
    for (std::size_t l = 0; l < config.decoder_layers; ++l) {
      const std::size_t in = l == 0 ? d + 2 * d : d;
      dec_.push_back(CellParams::init(CellKind::kGru, in, d, rng));
      register_cell(params_, "dec.layer" + std::to_string(l), dec_.back());
      init_.push_back(Tensor::uniform({d, d}, bound, rng));
      params_.add("dec.layer" + std::to_string(l) + ".W_init", init_.back());
    }
    attn_ = AttentionParams::init(d, 2 * d, d, rng);
    params_.add("attn.W_a", attn_.W_a);
    params_.add("attn.U_a", attn_.U_a);
    params_.add("attn.v_a", attn_.v_a);
    out_.weight = config.tie_embeddings ? tgt_embed_ : Tensor::uniform({config.target_vocab, d}, bound, rng);
    out_.bias = Tensor::zeros({config.target_vocab}, true);
    if (!config.tie_embeddings) params_.add("out.W", out_.weight);
    params_.add("out.b", out_.bias);
  }

  Tensor forward(const Batch& batch, const RunOptions& options) const override {
    check_ids(batch.source, config_.source_vocab, "source");
    check_ids(batch.target, config_.target_vocab, "target");
    Decoding dec = begin(batch.source, batch.source_mask, batch.size, batch.source_len, options);
    const auto cells = prepare(dec_);
    std::vector<Tensor> logits;
    for (std::size_t t = 0; t + 1 < batch.target_len; ++t) {
      logits.push_back(
          decode_step(dec, column(batch.target, batch.size, batch.target_len, t), cells, options, nullptr));
    }
    return stack_steps(logits);
  }

  std::unique_ptr<DecoderState> start(const TokenIds& encoder_input) const override {
    check_ids(encoder_input, config_.source_vocab, "source");
    const auto row = source_row(encoder_input);
    auto state = std::make_unique<State>();
    state->dec = begin(row.ids, row.mask, 1, row.ids.size(), RunOptions{});
    return state;
  }

  Tensor step(DecoderState& base, int token) const override {
    auto& state = dynamic_cast<State&>(base);
    const std::vector<int> ids{token};
    check_ids(ids, config_.target_vocab, "target");
    return decode_step(state.dec, ids, prepare(dec_), RunOptions{}, nullptr);
  }

  std::vector<AttentionMatrix> extract_attention(const TokenIds& encoder_input,
                                                 const TokenIds& predicted) const override {
    NoGradGuard no_grad;
    check_ids(encoder_input, config_.source_vocab, "source");
    check_ids(predicted, config_.target_vocab, "target");
    const auto row = source_row(encoder_input);
    Decoding dec = begin(row.ids, row.mask, 1, row.ids.size(), RunOptions{});
    const auto cells = prepare(dec_);
    AttentionMatrix m;
    m.label = "attention";
    int input = kBos;
    for (int next : predicted) {
      std::vector<Tensor> weights;
      decode_step(dec, {input}, cells, RunOptions{}, &weights);
      m.weights.emplace_back(weights.front().data().begin(), weights.front().data().end());
      input = next;
    }
    return {m};
  }

 private:
  /// Recurrent state shared by teacher forcing and incremental decoding.
  struct Decoding {
    std::shared_ptr<AdditiveAttention> attention;
    std::vector<CellState> layers;
  };

  struct State final : DecoderState {
    Decoding dec;
    std::unique_ptr<DecoderState> clone() const override { return std::make_unique<State>(*this); }
  };

  static std::vector<PreparedCell> prepare(const std::vector<CellParams>& cells) {
    std::vector<PreparedCell> out;
    for (const auto& c : cells) out.push_back(PreparedCell::from(c));
    return out;
  }

  Decoding begin(const std::vector<int>& ids, const std::vector<std::uint8_t>& mask, std::size_t rows,
                 std::size_t cols, const RunOptions& options) const {
    const std::size_t d = config_.d_model;
    std::vector<Tensor> inputs, keep;
    for (std::size_t t = 0; t < cols; ++t) {
      inputs.push_back(drop(gather_rows(src_embed_, column(ids, rows, cols, t)), config_.dropout, options));
      keep.push_back(keep_mask(mask, rows, cols, t, d));
    }
    std::vector<Tensor> outputs;
    Tensor first_backward;
    for (std::size_t l = 0; l < enc_fwd_.size(); ++l) {
      const auto zero = CellState::zeros(CellKind::kGru, rows, d);
      const auto fwd = unroll(enc_fwd_[l], inputs, zero, Direction::kForward, &keep);
      const auto bwd = unroll(enc_bwd_[l], inputs, zero, Direction::kBackward, &keep);
      outputs = concat_directions(fwd, bwd);
      first_backward = bwd.front().h;
      if (l + 1 < enc_fwd_.size()) {
        for (std::size_t t = 0; t < cols; ++t) inputs[t] = drop(outputs[t], config_.dropout, options);
      }
    }
    std::vector<Tensor> columns;
    for (const auto& o : outputs) columns.push_back(reshape(o, {rows, 1, 2 * d}));
    const Tensor states = columns.size() == 1 ? columns.front() : concat(columns, 1);

    Decoding dec;
    dec.attention = std::make_shared<AdditiveAttention>(attn_, states, mask);
    for (const auto& w : init_) {
      CellState s;
      s.h = tanh(matmul_bt(first_backward, w));
      dec.layers.push_back(s);
    }
    return dec;
  }

  Tensor decode_step(Decoding& dec, const std::vector<int>& tokens, const std::vector<PreparedCell>& cells,
                     const RunOptions& options, std::vector<Tensor>* trace) const {
    auto [weights, context] = dec.attention->attend(dec.layers.back().h);
    if (trace) trace->push_back(weights);
    Tensor x = concat({drop(gather_rows(tgt_embed_, tokens), config_.dropout, options), context}, 1);
    for (std::size_t l = 0; l < cells.size(); ++l) {
      dec.layers[l] = cell_step(x, dec.layers[l], cells[l]);
      x = drop(dec.layers[l].h, config_.dropout, options);
    }
    return out_(x);
  }

  Tensor src_embed_, tgt_embed_;
  std::vector<CellParams> enc_fwd_, enc_bwd_, dec_;
  std::vector<Tensor> init_;
  AttentionParams attn_;
  OutputLayer out_;
};

// ---- transformer ----------------------------------------------------------

class TransformerModel final : public Model {
 public:
  TransformerModel(const ModelConfig& config, std::mt19937_64& rng) : Model(config) {
    const std::size_t d = config.d_model;
    const Real bound = std::sqrt(1.0 / static_cast<Real>(d));
    src_embed_ = Tensor::uniform({config.source_vocab, d}, bound, rng);
    tgt_embed_ = Tensor::uniform({config.target_vocab, d}, bound, rng);
    params_.add("enc.embed", src_embed_);
    params_.add("dec.embed", tgt_embed_);
    for (std::size_t l = 0; l < config.encoder_layers; ++l) {
      enc_.push_back(TransformerBlockParams::init(d, config.heads, config.d_ff, rng));
      const std::string p = "enc.block" + std::to_string(l);
      register_heads(p, enc_.back().attention);
      register_ff(p, enc_.back().feed_forward);
      register_norm(p + ".norm1", enc_.back().norm_attention);
      register_norm(p + ".norm2", enc_.back().norm_feed_forward);
    }
    for (std::size_t l = 0; l < config.decoder_layers; ++l) {
      dec_.push_back(DecoderBlockParams::init(d, config.heads, config.d_ff, rng));
      const std::string p = "dec.block" + std::to_string(l);
      register_heads(p + ".self", dec_.back().self_attention);
      register_heads(p + ".cross", dec_.back().cross_attention);
      register_ff(p, dec_.back().feed_forward);
      register_norm(p + ".norm1", dec_.back().norm_self);
      register_norm(p + ".norm2", dec_.back().norm_cross);
      register_norm(p + ".norm3", dec_.back().norm_feed_forward);
    }
    enc_norm_ = NormParams::identity(d);
    dec_norm_ = NormParams::identity(d);
    register_norm("enc.norm", enc_norm_);
    register_norm("dec.norm", dec_norm_);
    out_.weight = config.tie_embeddings ? tgt_embed_ : Tensor::uniform({config.target_vocab, d}, bound, rng);
    out_.bias = Tensor::zeros({config.target_vocab}, true);
    if (!config.tie_embeddings) params_.add("out.W", out_.weight);
    params_.add("out.b", out_.bias);
  }

  Tensor forward(const Batch& batch, const RunOptions& options) const override {
    check_ids(batch.source, config_.source_vocab, "source");
    check_ids(batch.target, config_.target_vocab, "target");
    const std::size_t rows = batch.size, s = batch.source_len, t = batch.target_len - 1;
    const Tensor memory = encode(batch.source, batch.source_mask, rows, s, options);
    std::vector<int> inputs(rows * t);
    std::vector<std::uint8_t> input_mask(rows * t);
    for (std::size_t b = 0; b < rows; ++b) {
      for (std::size_t i = 0; i < t; ++i) {
        inputs[b * t + i] = batch.target[b * batch.target_len + i];
        input_mask[b * t + i] = batch.target_mask[b * batch.target_len + i];
      }
    }
    const Tensor logits = decode(memory, batch.source_mask, rows, s, inputs, input_mask, t, options, nullptr);
    return reshape(logits, {rows, t, config_.target_vocab});
  }

  std::unique_ptr<DecoderState> start(const TokenIds& encoder_input) const override {
    check_ids(encoder_input, config_.source_vocab, "source");
    NoGradGuard no_grad;
    const auto row = source_row(encoder_input);
    auto state = std::make_unique<State>();
    state->memory = encode(row.ids, row.mask, 1, row.ids.size(), RunOptions{});
    state->source_mask = row.mask;
    return state;
  }

  Tensor step(DecoderState& base, int token) const override {
    auto& state = dynamic_cast<State&>(base);
    const std::vector<int> ids{token};
    check_ids(ids, config_.target_vocab, "target");
    state.prefix.push_back(token);
    const std::size_t t = state.prefix.size();
    const Tensor logits = decode(state.memory, state.source_mask, 1, state.source_mask.size(), state.prefix,
                                 std::vector<std::uint8_t>(t, 1), t, RunOptions{}, nullptr);
    return slice(logits, 0, t - 1, t);
  }

  std::vector<AttentionMatrix> extract_attention(const TokenIds& encoder_input,
                                                 const TokenIds& predicted) const override {
    NoGradGuard no_grad;
    check_ids(encoder_input, config_.source_vocab, "source");
    check_ids(predicted, config_.target_vocab, "target");
    if (predicted.empty()) throw ContractError("extract_attention needs at least one target token");
    const auto row = source_row(encoder_input);
    const Tensor memory = encode(row.ids, row.mask, 1, row.ids.size(), RunOptions{});
    std::vector<int> inputs{kBos};
    inputs.insert(inputs.end(), predicted.begin(), predicted.end() - 1);
    std::vector<Tensor> trace;
    decode(memory, row.mask, 1, row.ids.size(), inputs, std::vector<std::uint8_t>(inputs.size(), 1), inputs.size(),
           RunOptions{}, &trace);
    const std::size_t heads = config_.heads, t = inputs.size(), s = row.ids.size();
    std::vector<AttentionMatrix> out;
    AttentionMatrix mean;
    mean.label = "mean";
    mean.weights.assign(t, std::vector<Real>(s, 0.0));
    for (std::size_t l = 0; l < trace.size(); ++l) {
      const auto w = trace[l].data();
      for (std::size_t h = 0; h < heads; ++h) {
        AttentionMatrix m;
        m.label = "layer" + std::to_string(l) + ".head" + std::to_string(h);
        for (std::size_t i = 0; i < t; ++i) {
          const auto* rowp = w.data() + (h * t + i) * s;
          m.weights.emplace_back(rowp, rowp + s);
          for (std::size_t j = 0; j < s; ++j) mean.weights[i][j] += rowp[j];
        }
        out.push_back(std::move(m));
      }
    }
    const Real n = static_cast<Real>(trace.size() * heads);
    for (auto& r : mean.weights) {
      for (auto& v : r) v /= n;
    }
    out.push_back(std::move(mean));
    return out;
  }

 private:
  struct State final : DecoderState {
    Tensor memory;
    std::vector<std::uint8_t> source_mask;
    std::vector<int> prefix;
    std::unique_ptr<DecoderState> clone() const override { return std::make_unique<State>(*this); }
  };

  void register_heads(const std::string& prefix, const MultiHeadParams& p) {
    for (std::size_t h = 0; h < p.heads(); ++h) {
      const std::string hp = prefix + ".head" + std::to_string(h);
      params_.add(hp + ".Wq", p.Wq[h]);
      params_.add(hp + ".Wk", p.Wk[h]);
      params_.add(hp + ".Wv", p.Wv[h]);
      params_.add(hp + ".bq", p.bq[h]);
      params_.add(hp + ".bk", p.bk[h]);
      params_.add(hp + ".bv", p.bv[h]);
    }
    params_.add(prefix + ".Wo", p.Wo);
    params_.add(prefix + ".bo", p.bo);
  }

  void register_ff(const std::string& prefix, const FeedForwardParams& p) {
    params_.add(prefix + ".ff1", p.W1);
    params_.add(prefix + ".ff1_b", p.b1);
    params_.add(prefix + ".ff2", p.W2);
    params_.add(prefix + ".ff2_b", p.b2);
  }

  void register_norm(const std::string& prefix, const NormParams& p) {
    params_.add(prefix + ".gain", p.gain);
    params_.add(prefix + ".bias", p.bias);
  }

  BlockOptions block_options(const RunOptions& options, std::vector<Tensor>* trace) const {
    BlockOptions b;
    b.heads = config_.heads;
    b.attention_dropout = config_.attention_dropout;
    b.residual_dropout = config_.residual_dropout;
    b.training = options.training;
    b.layer_norm = config_.layer_norm;
    b.rng = options.rng ? options.rng : &fallback_rng();
    b.attention_trace = trace;
    return b;
  }

  /// sqrt(d)-scaled embeddings plus sinusoidal positions, [rows*len x d].
  Tensor embed(const Tensor& table, const std::vector<int>& ids, std::size_t rows, std::size_t len,
               const RunOptions& options) const {
    const std::size_t d = config_.d_model;
    const Tensor pe = positional_encoding(len, d);
    std::vector<Real> tiled(rows * len * d);
    for (std::size_t b = 0; b < rows; ++b) std::copy(pe.data().begin(), pe.data().end(), tiled.begin() + static_cast<std::ptrdiff_t>(b * len * d));
    const Tensor x = add(scale(gather_rows(table, ids), std::sqrt(static_cast<Real>(d))),
                         Tensor::from({rows * len, d}, std::move(tiled)));
    return drop(x, config_.residual_dropout, options);
  }

  Tensor encode(const std::vector<int>& ids, const std::vector<std::uint8_t>& mask, std::size_t rows, std::size_t len,
                const RunOptions& options) const {
    const BlockOptions bo = block_options(options, nullptr);
    const MaskSpec spec = MaskSpec::padding(mask, rows, len, len);
    Tensor x = embed(src_embed_, ids, rows, len, options);
    for (const auto& block : enc_) x = transformer_block(x, block, spec, bo);
    return config_.layer_norm ? layer_norm(x, enc_norm_.gain, enc_norm_.bias) : x;
  }

  Tensor decode(const Tensor& memory, const std::vector<std::uint8_t>& source_mask, std::size_t rows,
                std::size_t source_len, const std::vector<int>& inputs, const std::vector<std::uint8_t>& input_mask,
                std::size_t len, const RunOptions& options, std::vector<Tensor>* trace) const {
    const BlockOptions bo = block_options(options, trace);
    const MaskSpec self_mask = MaskSpec::causal_padding(input_mask, rows, len);
    const MaskSpec cross_mask = MaskSpec::padding(source_mask, rows, len, source_len);
    Tensor y = embed(tgt_embed_, inputs, rows, len, options);
    for (const auto& block : dec_) y = decoder_block(y, memory, block, self_mask, cross_mask, bo);
    if (config_.layer_norm) y = layer_norm(y, dec_norm_.gain, dec_norm_.bias);
    return out_(y);
  }

  Tensor src_embed_, tgt_embed_;
  std::vector<TransformerBlockParams> enc_;
  std::vector<DecoderBlockParams> dec_;
  NormParams enc_norm_, dec_norm_;
  OutputLayer out_;
};

}  // namespace

// ---- model plumbing -------------------------------------------------------

std::vector<AttentionMatrix> Model::extract_attention(const TokenIds&, const TokenIds&) const {
  throw UnsupportedArchitecture("architecture has no attention");
}

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".cfg");
}

void Model::save(const std::filesystem::path& checkpoint) const {
  const auto tmp = std::filesystem::path(checkpoint.string() + ".tmp");
  save_tensors(tmp, params_.entries());
  std::filesystem::rename(tmp, checkpoint);
  std::ofstream cfg(manifest_path(checkpoint), std::ios::binary | std::ios::trunc);
  if (!cfg) throw IoError("cannot write model manifest next to " + checkpoint.string());
  cfg << config_.to_manifest();
}

std::unique_ptr<Model> make_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  switch (config.arch) {
    case Architecture::kSeq2SeqLstm: return std::make_unique<Seq2SeqLstm>(config, rng);
    case Architecture::kAttnGru: return std::make_unique<AttnGru>(config, rng);
    case Architecture::kTransformer: return std::make_unique<TransformerModel>(config, rng);
  }
  throw ConfigError("unknown architecture");
}

std::unique_ptr<Model> load_model(const std::filesystem::path& checkpoint) {
  const ModelConfig config = ModelConfig::from_manifest(KeyValues::load(manifest_path(checkpoint)));
  auto model = make_model(config, 0);
  model->parameters().assign(load_tensors(checkpoint));
  return model;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, vs = c.source_vocab, vt = c.target_vocab;
  std::size_t n = vs * d + vt * d + (c.tie_embeddings ? 0 : vt * d) + vt;
  switch (c.arch) {
    case Architecture::kSeq2SeqLstm:
      n += (c.encoder_layers + c.decoder_layers) * CellParams::count(CellKind::kLstm, d, d);
      break;
    case Architecture::kAttnGru:
      n += 2 * CellParams::count(CellKind::kGru, d, d);
      n += (c.encoder_layers - 1) * 2 * CellParams::count(CellKind::kGru, 2 * d, d);
      n += CellParams::count(CellKind::kGru, 3 * d, d);
      n += (c.decoder_layers - 1) * CellParams::count(CellKind::kGru, d, d);
      n += c.decoder_layers * d * d;
      n += AttentionParams::count(d, 2 * d, d);
      break;
    case Architecture::kTransformer:
      n += c.encoder_layers * TransformerBlockParams::count(d, c.d_ff);
      n += c.decoder_layers * DecoderBlockParams::count(d, c.d_ff);
      n += 2 * (2 * d);
      break;
  }
  return n;
}

// ---- decoding -------------------------------------------------------------

TokenIds encoder_input(const TokenIds& source) {
  TokenIds ids = source;
  ids.push_back(kEos);
  return ids;
}

std::vector<Real> next_token_log_probs(const Tensor& logits) {
  const auto row = logits.data();
  std::vector<Real> lp(row.begin(), row.end());
  lp[kPad] = -std::numeric_limits<Real>::infinity();
  lp[kBos] = -std::numeric_limits<Real>::infinity();
  Real top = -std::numeric_limits<Real>::infinity();
  for (Real v : lp) top = std::max(top, v);
  Real total = 0;
  for (Real v : lp) total += std::exp(v - top);
  const Real lse = top + std::log(total);
  for (Real& v : lp) v -= lse;
  return lp;
}

TokenIds greedy_decode(const Model& model, const TokenIds& source, std::size_t max_len) {
  NoGradGuard no_grad;
  auto state = model.start(encoder_input(source));
  TokenIds out;
  int input = kBos;
  while (out.size() < max_len) {
    const auto lp = next_token_log_probs(model.step(*state, input));
    int best = 0;
    for (int v = 1; v < static_cast<int>(lp.size()); ++v) {
      if (lp[static_cast<std::size_t>(v)] > lp[static_cast<std::size_t>(best)]) best = v;
    }
    if (best == kEos) break;
    out.push_back(best);
    input = best;
  }
  return out;
}

Real Hypothesis::normalized(Real alpha) const {
  const Real len = static_cast<Real>(std::max<std::size_t>(length, 1));
  return alpha == 0.0 ? log_prob : log_prob / std::pow(len, alpha);
}

Hypothesis beam_search(const Model& model, const TokenIds& source, std::size_t beam, std::size_t max_len,
                       Real length_penalty) {
  if (beam < 1) throw ConfigError("beam width must be at least 1");
  NoGradGuard no_grad;

  struct Live {
    TokenIds tokens;
    Real score = 0;
    std::unique_ptr<DecoderState> state;
    std::vector<Real> next;  // log-probs of the following token
  };
  struct Candidate {
    Real score;
    Real step_lp;
    std::size_t parent;
    int token;
  };

  std::vector<Live> alive;
  {
    Live root;
    root.state = model.start(encoder_input(source));
    root.next = next_token_log_probs(model.step(*root.state, kBos));
    alive.push_back(std::move(root));
  }
  std::vector<Hypothesis> finished;
  auto better = [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.step_lp != b.step_lp) return a.step_lp > b.step_lp;
    if (a.parent != b.parent) return a.parent < b.parent;
    return a.token < b.token;
  };

  for (std::size_t len = 1; len <= max_len && !alive.empty(); ++len) {
    std::vector<Candidate> candidates;
    for (std::size_t p = 0; p < alive.size(); ++p) {
      for (std::size_t v = 0; v < alive[p].next.size(); ++v) {
        const Real lp = alive[p].next[v];
        if (!std::isfinite(lp)) continue;
        candidates.push_back({alive[p].score + lp, lp, p, static_cast<int>(v)});
      }
    }
    const std::size_t keep = std::min(beam, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    std::vector<Live> next_alive;
    for (std::size_t k = 0; k < keep; ++k) {
      const Candidate& c = candidates[k];
      const Live& parent = alive[c.parent];
      if (c.token == kEos || len == max_len) {
        Hypothesis h;
        h.tokens = parent.tokens;
        if (c.token != kEos) h.tokens.push_back(c.token);
        h.log_prob = c.score;
        h.length = len;
        h.finished = c.token == kEos;
        finished.push_back(std::move(h));
        continue;
      }
      Live child;
      child.tokens = parent.tokens;
      child.tokens.push_back(c.token);
      child.score = c.score;
      child.state = parent.state->clone();
      child.next = next_token_log_probs(model.step(*child.state, c.token));
      next_alive.push_back(std::move(child));
    }
    alive = std::move(next_alive);
    if (!finished.empty() && !alive.empty()) {
      Real best_done = -std::numeric_limits<Real>::infinity();
      for (const auto& h : finished) best_done = std::max(best_done, h.normalized(length_penalty));
      // log-probs only decrease, so a live hypothesis can at best keep its score spread over max_len tokens
      Real best_live = -std::numeric_limits<Real>::infinity();
      for (const auto& l : alive) {
        const Real bound = length_penalty == 0.0
                               ? l.score
                               : l.score / std::pow(static_cast<Real>(max_len), length_penalty);
        best_live = std::max(best_live, bound);
      }
      if (best_done >= best_live) break;
    }
  }
  if (finished.empty()) return {};
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    if (finished[i].normalized(length_penalty) > finished[best].normalized(length_penalty)) best = i;
  }
  return finished[best];
}

TokenIds beam_decode(const Model& model, const TokenIds& source, std::size_t beam, std::size_t max_len,
                     Real length_penalty) {
  return beam_search(model, source, beam, max_len, length_penalty).tokens;
}

Real sequence_log_prob(const Model& model, const TokenIds& source, const TokenIds& tokens, bool with_eos) {
  NoGradGuard no_grad;
  auto state = model.start(encoder_input(source));
  Real total = 0;
  int input = kBos;
  for (int tok : tokens) {
    total += next_token_log_probs(model.step(*state, input))[static_cast<std::size_t>(tok)];
    input = tok;
  }
  if (with_eos) total += next_token_log_probs(model.step(*state, input))[kEos];
  return total;
}

}  // namespace nmt
