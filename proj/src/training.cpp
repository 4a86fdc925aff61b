#include "nmt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "nmt/error.hpp"

namespace nmt {

// ---- optimizer ------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<NamedTensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config_.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0 && config_.beta2 >= 0.0 && config_.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

double AdamOptimizer::learning_rate(std::size_t t) const {
  if (config_.warmup_steps == 0 || t == 0) return config_.learning_rate;
  const double w = static_cast<double>(config_.warmup_steps);
  const double s = static_cast<double>(t);
  return config_.learning_rate * std::min(s / w, std::sqrt(w / s));
}

void AdamOptimizer::step() {
  for (const auto& p : params_) {
    for (Real g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = learning_rate(step_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor t = params_[k].tensor;
    const auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      w[i] -= lr * mh / (std::sqrt(vh) + config_.epsilon);
    }
    for (Real x : w) {
      if (!std::isfinite(x)) throw NumericError("update left non-finite values in parameter " + params_[k].name);
    }
  }
}

double gradient_norm(const std::vector<NamedTensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (Real g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_gradients(const std::vector<NamedTensor>& params, double max_norm) {
  const double norm = gradient_norm(params);
  if (norm > max_norm && std::isfinite(norm)) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      Tensor t = p.tensor;
      for (Real& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

Tensor sequence_loss(const Model& model, const Batch& batch, const RunOptions& options) {
  const Tensor logits = model.forward(batch, options);  // [B, T-1, V]
  const std::size_t rows = batch.size, steps = batch.target_len - 1, vocab = logits.dim(2);
  std::vector<int> targets(rows * steps);
  std::vector<std::uint8_t> mask(rows * steps);
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      targets[b * steps + t] = batch.target[b * batch.target_len + t + 1];
      mask[b * steps + t] = batch.target_mask[b * batch.target_len + t + 1];
    }
  }
  return cross_entropy(reshape(logits, {rows * steps, vocab}), targets, mask);
}

// ---- configuration and report ---------------------------------------------

void TrainConfig::apply(const KeyValues& kv) {
  auto size = [&](const char* key, std::size_t& field) {
    if (!kv.has(key)) return;
    const long long v = kv.get_int(key);
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    field = static_cast<std::size_t>(v);
  };
  size("steps", steps);
  size("batch_size", batch_size);
  size("eval_every", eval_every);
  size("patience", patience);
  size("log_every", log_every);
  size("warmup_steps", adam.warmup_steps);
  size("bleu_beam", bleu_beam);
  size("max_decode_len", max_decode_len);
  if (kv.has("seed")) seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  if (kv.has("lr")) adam.learning_rate = kv.get_double("lr");
  if (kv.has("beta1")) adam.beta1 = kv.get_double("beta1");
  if (kv.has("beta2")) adam.beta2 = kv.get_double("beta2");
  if (kv.has("epsilon")) adam.epsilon = kv.get_double("epsilon");
  if (kv.has("clip_norm")) clip_norm = kv.get_double("clip_norm");
  if (kv.has("bleu_smoothing")) bleu_smoothing = parse_smoothing(kv.get("bleu_smoothing"));
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
}

std::string TrainReport::to_tsv() const {
  std::string out = "step\ttrain_loss\tval_loss\tval_bleu\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.6f\t", r.step, r.train_loss);
    out += buf;
    if (r.val_loss) {
      std::snprintf(buf, sizeof(buf), "%.6f", *r.val_loss);
      out += buf;
    } else {
      out += '-';
    }
    out += '\t';
    if (r.val_bleu) {
      std::snprintf(buf, sizeof(buf), "%.2f", *r.val_bleu);
      out += buf;
    } else {
      out += '-';
    }
    out += '\n';
  }
  return out;
}

// ---- evaluation -----------------------------------------------------------

double evaluate_loss(const Model& model, const ParallelCorpus& corpus, std::size_t batch_size) {
  NoGradGuard no_grad;
  double weighted = 0.0;
  std::size_t tokens = 0;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(order.size(), begin + batch_size);
    const Batch batch = make_batch(corpus, std::span<const std::size_t>(order.data() + begin, end - begin));
    std::size_t count = 0;
    for (std::size_t b = 0; b < batch.size; ++b) count += batch.target_lengths[b] - 1;
    weighted += sequence_loss(model, batch).item() * static_cast<double>(count);
    tokens += count;
  }
  return tokens == 0 ? 0.0 : weighted / static_cast<double>(tokens);
}

std::vector<TokenIds> translate_corpus(const Model& model, const std::vector<TokenIds>& sources, std::size_t beam,
                                       std::size_t max_len, double length_penalty) {
  std::vector<TokenIds> out;
  out.reserve(sources.size());
  for (const auto& s : sources) {
    out.push_back(beam <= 1 ? greedy_decode(model, s, max_len) : beam_decode(model, s, beam, max_len, length_penalty));
  }
  return out;
}

double token_accuracy(const std::vector<TokenIds>& hypotheses, const std::vector<TokenIds>& references) {
  if (hypotheses.size() != references.size()) throw AlignmentError("token_accuracy: corpus sizes differ");
  std::size_t correct = 0, total = 0;
  for (std::size_t k = 0; k < references.size(); ++k) {
    const auto& h = hypotheses[k];
    const auto& r = references[k];
    for (std::size_t i = 0; i < r.size(); ++i) correct += i < h.size() && h[i] == r[i];
    correct += h.size() == r.size();
    total += r.size() + 1;
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

BleuBreakdown corpus_bleu_ids(const std::vector<TokenIds>& hypotheses, const std::vector<TokenIds>& references,
                              const Vocabulary& vocab, Smoothing smoothing) {
  std::vector<Sentence> hyps, refs;
  for (const auto& h : hypotheses) hyps.push_back(bleu_tokens(ids_to_line(vocab, h)));
  for (const auto& r : references) refs.push_back(bleu_tokens(ids_to_line(vocab, r)));
  return corpus_bleu(hyps, refs, 4, smoothing);
}

// ---- training loop --------------------------------------------------------

namespace {

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

TrainReport train(Model& model, const ParallelCorpus& train_set, const ParallelCorpus* validation,
                  const TrainConfig& config, const TrainLogger& log) {
  if (train_set.size() == 0) throw ConfigError("training corpus is empty");
  if (config.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  const auto started = std::chrono::steady_clock::now();
  const bool has_val = validation != nullptr && validation->size() > 0;
  const bool files = !config.out_dir.empty();
  const std::size_t max_len = config.max_decode_len ? config.max_decode_len : model.config().max_decode_len;
  if (files) std::filesystem::create_directories(config.out_dir);
  const auto best_path = config.out_dir / "model.nmtf";
  const auto report_path = config.out_dir / "report.tsv";

  TrainReport report;
  auto finish = [&] {
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (files) write_text_atomic(report_path, report.to_tsv());
  };
  if (files) model.save(best_path);

  auto& params = model.parameters().entries();
  AdamOptimizer adam(params, config.adam);
  std::mt19937_64 dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  RunOptions run{true, &dropout_rng};

  std::vector<Batch> batches;
  std::size_t epoch = 0, cursor = 0, stale = 0;
  try {
    for (std::size_t step = 1; step <= config.steps; ++step) {
      if (cursor == batches.size()) {
        batches = make_batches(train_set, config.batch_size, config.seed + epoch++);
        cursor = 0;
      }
      const Batch& batch = batches[cursor++];
      model.parameters().zero_grad();
      const Tensor loss = sequence_loss(model, batch, run);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        active_tape().clear();
        throw NumericError("training diverged at step " + std::to_string(step) + ": loss is " + fixed(value, 6));
      }
      backward(loss);
      clip_gradients(params, config.clip_norm);
      adam.step();

      TrainRow row;
      row.step = step;
      row.train_loss = value;
      if (config.log_every && step % config.log_every == 0 && log) {
        log("step " + std::to_string(step) + " loss " + fixed(value, 4));
      }
      const bool evaluate = config.eval_every && (step % config.eval_every == 0 || step == config.steps);
      if (evaluate && has_val) {
        row.val_loss = evaluate_loss(model, *validation, config.batch_size);
        const auto hyps = translate_corpus(model, validation->source, config.bleu_beam, max_len);
        row.val_bleu = corpus_bleu_ids(hyps, validation->target, *validation->target_vocab, config.bleu_smoothing).score * 100.0;
        if (log) log("eval step " + std::to_string(step) + " val_loss " + fixed(*row.val_loss, 4) + " val_bleu " + fixed(*row.val_bleu, 2));
        if (!report.best_val_loss || *row.val_loss < *report.best_val_loss) {
          report.best_val_loss = row.val_loss;
          report.best_step = step;
          stale = 0;
          if (files) model.save(best_path);
        } else {
          ++stale;
        }
      } else if (evaluate && files) {
        model.save(best_path);
        report.best_step = step;
      }
      report.rows.push_back(row);
      report.steps = step;
      if (files && evaluate) write_text_atomic(report_path, report.to_tsv());
      if (config.patience && stale >= config.patience) {
        report.early_stopped = true;
        if (log) log("early stop at step " + std::to_string(step));
        break;
      }
    }
  } catch (const NumericError&) {
    finish();
    throw;
  }
  if (files) model.save(config.out_dir / "last.nmtf");
  finish();
  return report;
}

}  // namespace nmt
