#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nmt/bleu.hpp"
#include "nmt/corpus.hpp"
#include "nmt/model.hpp"

namespace nmt {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  /// 0 keeps the rate constant; otherwise linear warmup then inverse-sqrt decay.
  std::size_t warmup_steps = 0;
};

/// Bias-corrected Adam over a fixed list of parameters.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<NamedTensor> params, AdamConfig config);

  /// Applies one update from the parameters' current gradients.
  void step();

  /// Learning rate used by update number `t` (1-based).
  double learning_rate(std::size_t t) const;

  std::size_t step_count() const { return step_; }
  const std::vector<Real>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<Real>& second_moment(std::size_t i) const { return v_[i]; }
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<NamedTensor> params_;
  AdamConfig config_;
  std::vector<std::vector<Real>> m_, v_;
  std::size_t step_ = 0;
};

/// Global L2 norm of all gradients.
double gradient_norm(const std::vector<NamedTensor>& params);

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
double clip_gradients(const std::vector<NamedTensor>& params, double max_norm);

/// Masked mean cross-entropy of the teacher-forced predictions of `batch`.
Tensor sequence_loss(const Model& model, const Batch& batch, const RunOptions& options = {});

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 128;
  std::size_t eval_every = 200;
  std::size_t patience = 0;  // evaluations without improvement before stopping; 0 disables
  std::uint64_t seed = 1;
  AdamConfig adam;
  double clip_norm = 5.0;
  std::size_t log_every = 50;
  std::size_t bleu_beam = 1;
  Smoothing bleu_smoothing = Smoothing::kAddOne;
  std::size_t max_decode_len = 0;  // 0: the model's configured limit
  std::filesystem::path out_dir;   // empty: no files are written

  /// Overrides fields present in `kv` (steps, batch_size, lr, warmup_steps, ...).
  void apply(const KeyValues& kv);
};

struct TrainRow {
  std::size_t step = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_bleu;  // x100
};

struct TrainReport {
  std::vector<TrainRow> rows;
  std::size_t steps = 0;
  double wall_seconds = 0.0;
  std::optional<std::size_t> best_step;
  std::optional<double> best_val_loss;
  bool early_stopped = false;

  /// "step\ttrain_loss\tval_loss\tval_bleu" then one line per row; "-" marks a missing value.
  std::string to_tsv() const;
};

/// Observer for progress lines (step logs, evaluations).
using TrainLogger = std::function<void(const std::string&)>;

/// Mini-batch Adam training with clipping, periodic validation and
/// best-checkpoint retention. With an output directory, "model.nmtf" holds
/// the best validation checkpoint (the latest one without validation data),
/// "last.nmtf" the final weights, and "report.tsv" the report. A non-finite
/// loss or gradient stops training with NumericError and leaves the last
/// good checkpoint in place.
TrainReport train(Model& model, const ParallelCorpus& train_set, const ParallelCorpus* validation,
                  const TrainConfig& config, const TrainLogger& log = {});

/// Teacher-forced masked mean loss over a corpus.
double evaluate_loss(const Model& model, const ParallelCorpus& corpus, std::size_t batch_size);

/// Decodes every source sentence (greedy for beam 1).
std::vector<TokenIds> translate_corpus(const Model& model, const std::vector<TokenIds>& sources, std::size_t beam,
                                       std::size_t max_len, double length_penalty = 0.0);

/// Position-wise accuracy of hypotheses against references, counted over
/// reference tokens plus the end of sentence (a length mismatch counts as errors).
double token_accuracy(const std::vector<TokenIds>& hypotheses, const std::vector<TokenIds>& references);

/// Corpus BLEU of id sequences rendered through the target vocabulary.
BleuBreakdown corpus_bleu_ids(const std::vector<TokenIds>& hypotheses, const std::vector<TokenIds>& references,
                              const Vocabulary& vocab, Smoothing smoothing = Smoothing::kAddOne);

}  // namespace nmt
