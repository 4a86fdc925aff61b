#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "nmt/attention.hpp"
#include "nmt/checkpoint.hpp"
#include "nmt/config.hpp"
#include "nmt/corpus.hpp"
#include "nmt/tensor.hpp"

namespace nmt {

enum class Architecture { kSeq2SeqLstm, kAttnGru, kTransformer };

Architecture parse_architecture(const std::string& name);
std::string architecture_name(Architecture arch);

struct ModelConfig {
  Architecture arch = Architecture::kTransformer;
  std::size_t d_model = 512;
  std::size_t encoder_layers = 4;
  std::size_t decoder_layers = 4;
  std::size_t heads = 8;
  std::size_t d_ff = 1024;
  double dropout = 0.2;            // recurrent models
  double attention_dropout = 0.1;  // transformer
  double residual_dropout = 0.1;   // transformer
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;
  std::size_t max_decode_len = 100;
  bool tie_embeddings = false;
  bool layer_norm = true;

  /// Hyperparameters of the reference setup for each architecture.
  static ModelConfig defaults(Architecture arch);

  void validate() const;
  /// "key = value" lines for every field.
  std::string to_manifest() const;
  static ModelConfig from_manifest(const KeyValues& kv);
  /// Overrides fields present in `kv`; unknown keys are left for the caller.
  void apply(const KeyValues& kv);
};

/// Named trainable tensors in registration order.
class ParameterSet {
 public:
  void add(const std::string& name, const Tensor& tensor);
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor>& entries() { return entries_; }
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t count() const;
  void zero_grad();
  /// Copies values from a loaded checkpoint; names and shapes must match exactly.
  void assign(const std::vector<NamedTensor>& loaded);

 private:
  std::vector<NamedTensor> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct RunOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

/// Incremental decoding state for one hypothesis.
class DecoderState {
 public:
  virtual ~DecoderState() = default;
  virtual std::unique_ptr<DecoderState> clone() const = 0;
};

/// A trainable encoder-decoder translation model.
class Model {
 public:
  explicit Model(ModelConfig config) : config_(std::move(config)) {}
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Teacher-forced logits [batch, target_len - 1, V]: position i sees the
  /// source and target[0..i] (BOS first).
  virtual Tensor forward(const Batch& batch, const RunOptions& options) const = 0;

  /// Encodes one source sequence given exactly as encoder input (EOS included by the caller).
  virtual std::unique_ptr<DecoderState> start(const TokenIds& encoder_input) const = 0;
  /// Feeds `token` as the next decoder input and returns next-token logits [1 x V].
  virtual Tensor step(DecoderState& state, int token) const = 0;

  /// Attention grids for a teacher-forced pass; `predicted` are the target
  /// tokens being predicted (decoder input is BOS followed by all but the last).
  virtual std::vector<AttentionMatrix> extract_attention(const TokenIds& encoder_input,
                                                         const TokenIds& predicted) const;

  std::size_t count_parameters() const { return params_.count(); }

  void save(const std::filesystem::path& checkpoint) const;

 protected:
  ModelConfig config_;
  ParameterSet params_;
};

std::unique_ptr<Model> make_model(const ModelConfig& config, std::uint64_t seed);

/// Loads "<path>" plus the manifest next to it ("<path>.cfg").
std::unique_ptr<Model> load_model(const std::filesystem::path& checkpoint);

/// Closed-form trainable parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& config);

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint);

// ---- decoding -------------------------------------------------------------

/// tokens + EOS, the encoder input used in training.
TokenIds encoder_input(const TokenIds& source);

/// Row-wise log-softmax of step logits with PAD and BOS excluded.
std::vector<Real> next_token_log_probs(const Tensor& logits);

/// Tokenwise argmax from BOS until EOS or `max_len` tokens; ties go to the lowest id.
TokenIds greedy_decode(const Model& model, const TokenIds& source, std::size_t max_len);

struct Hypothesis {
  TokenIds tokens;  // without EOS
  Real log_prob = 0;
  std::size_t length = 0;  // generated tokens including EOS
  bool finished = false;   // ended with EOS rather than by truncation
  Real normalized(Real alpha) const;
};

/// Length-normalized beam search; score = log P / length^alpha.
Hypothesis beam_search(const Model& model, const TokenIds& source, std::size_t beam, std::size_t max_len,
                       Real length_penalty);
TokenIds beam_decode(const Model& model, const TokenIds& source, std::size_t beam, std::size_t max_len,
                     Real length_penalty);

/// Sum of next-token log-probs of `tokens` (plus EOS when `with_eos`).
Real sequence_log_prob(const Model& model, const TokenIds& source, const TokenIds& tokens, bool with_eos);

}  // namespace nmt
