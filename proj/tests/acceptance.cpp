// One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nmt/attention.hpp"
#include "nmt/bleu.hpp"
#include "nmt/bpe.hpp"
#include "nmt/corpus.hpp"
#include "nmt/model.hpp"
#include "nmt/recurrent.hpp"
#include "nmt/training.hpp"
#include "nmt/transformer.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace nmt;
using nmt::testing::check_gradients;
using nmt::testing::probe_loss;
using nmt::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Outcome& o) {
  std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

void run_criterion(int id, const std::string& title, const std::function<Outcome()>& fn) {
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, title, o);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

const Architecture kAll[] = {Architecture::kSeq2SeqLstm, Architecture::kAttnGru, Architecture::kTransformer};

// ---- 1 ------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  double worst = 0;
  std::string worst_name;
  auto note = [&](const std::string& name, const testing::GradCheck& g) {
    if (g.max_rel_error > worst) {
      worst = g.max_rel_error;
      worst_name = name + " " + g.worst;
    }
  };

  const std::size_t m = 3, k = 4, n = 2;
  const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), c = random_tensor({m, k}, rng);
  const Tensor d = random_tensor({n, k}, rng), s = Tensor::from({1}, {0.7}, true);
  const Tensor gain = random_tensor({k}, rng), bias = random_tensor({k}, rng), vec = random_tensor({k}, rng);
  const Tensor a3 = random_tensor({2, m, k}, rng), b3 = random_tensor({2, k, n}, rng), bt3 = random_tensor({2, n, k}, rng);
  const Tensor table = random_tensor({6, k}, rng);
  std::vector<std::uint8_t> fill(m * k, 0);
  fill[1] = 1;
  const std::vector<int> ids{5, 0, 5, 2}, targets{0, 3, 1};
  const std::vector<std::uint8_t> tmask{1, 0, 1};
  const std::vector<std::pair<std::string, std::pair<std::vector<Tensor>, std::function<Tensor()>>>> ops{
      {"matmul", {{a, b}, [&] { return probe_loss(matmul(a, b)); }}},
      {"matmul_bt", {{a, d}, [&] { return probe_loss(matmul_bt(a, d)); }}},
      {"bmm", {{a3, b3}, [&] { return probe_loss(bmm(a3, b3)); }}},
      {"bmm_t", {{a3, bt3}, [&] { return probe_loss(bmm(a3, bt3, true)); }}},
      {"add", {{a, c}, [&] { return probe_loss(add(a, c)); }}},
      {"sub", {{a, c}, [&] { return probe_loss(sub(a, c)); }}},
      {"mul", {{a, c}, [&] { return probe_loss(mul(a, c)); }}},
      {"mul_scalar", {{a, s}, [&] { return probe_loss(mul(a, s)); }}},
      {"scale", {{a}, [&] { return probe_loss(scale(a, -1.3)); }}},
      {"add_scalar", {{a}, [&] { return probe_loss(add_scalar(a, 0.4)); }}},
      {"tanh", {{a}, [&] { return probe_loss(tanh(a)); }}},
      {"sigmoid", {{a}, [&] { return probe_loss(sigmoid(a)); }}},
      {"relu", {{a}, [&] { return probe_loss(relu(add_scalar(a, 0.05))); }}},
      {"exp", {{a}, [&] { return probe_loss(exp(a)); }}},
      {"softmax", {{a}, [&] { return probe_loss(softmax(a, 1)); }}},
      {"softmax_axis0", {{a}, [&] { return probe_loss(softmax(a, 0)); }}},
      {"log_softmax", {{a}, [&] { return probe_loss(log_softmax(a)); }}},
      {"cross_entropy", {{a}, [&] { return cross_entropy(a, targets, tmask); }}},
      {"reshape", {{a}, [&] { return probe_loss(reshape(a, {k, m})); }}},
      {"transpose", {{a}, [&] { return probe_loss(transpose(a)); }}},
      {"permute", {{a3}, [&] { return probe_loss(permute(a3, {2, 0, 1})); }}},
      {"concat", {{a, c}, [&] { return probe_loss(concat({a, c, a}, 1)); }}},
      {"slice", {{a3}, [&] { return probe_loss(slice(a3, 2, 1, k)); }}},
      {"gather_rows", {{table}, [&] { return probe_loss(gather_rows(table, ids)); }}},
      {"tile_rows", {{vec}, [&] { return probe_loss(tile_rows(vec, 3)); }}},
      {"sum", {{a}, [&] { return mul(sum(a), sum(a)); }}},
      {"mean", {{a, c}, [&] { return mul(mean(a), sum(c)); }}},
      {"masked_fill", {{a}, [&] { return probe_loss(masked_fill(a, fill, -2.0)); }}},
      {"layer_norm", {{a, gain, bias}, [&] { return probe_loss(layer_norm(a, gain, bias)); }}},
      {"dropout_eval", {{a}, [&] { return probe_loss(dropout(a, 0.3, false, rng)); }}},
  };
  for (const auto& [name, op] : ops) note(name, check_gradients(op.first, op.second, rng));

  // cells, additive attention and transformer blocks on their own
  for (CellKind kind : {CellKind::kRnn, CellKind::kGru, CellKind::kLstm}) {
    const CellParams p = CellParams::init(kind, 3, 4, rng);
    const Tensor x1 = random_tensor({2, 3}, rng), x2 = random_tensor({2, 3}, rng);
    std::vector<Tensor> args{x1, x2};
    for (const auto& [nm, t] : p.tensors) args.push_back(t);
    note(cell_kind_name(kind), check_gradients(args, [&] {
           CellState st = CellState::zeros(kind, 2, 4);
           st = cell_step(x1, st, p);
           st = cell_step(x2, st, p);
           return probe_loss(kind == CellKind::kLstm ? add(st.h, st.c) : st.h);
         }, rng));
  }
  {
    const AttentionParams p = AttentionParams::init(4, 6, 5, rng);
    const Tensor enc = random_tensor({2, 3, 6}, rng), dec = random_tensor({2, 4}, rng);
    note("additive_attention", check_gradients({p.W_a, p.U_a, p.v_a, enc, dec}, [&] {
           AdditiveAttention att(p, enc, {1, 1, 0, 1, 1, 1});
           const auto [w, ctx] = att.attend(dec);
           return add(probe_loss(w, 3), probe_loss(ctx, 4));
         }, rng));
  }
  {
    const std::size_t dm = 8;
    const TransformerBlockParams enc = TransformerBlockParams::init(dm, 2, 12, rng);
    const DecoderBlockParams dec = DecoderBlockParams::init(dm, 2, 12, rng);
    const Tensor x = random_tensor({6, dm}, rng), y = random_tensor({4, dm}, rng);
    BlockOptions opt;
    opt.heads = 2;
    note("transformer_blocks", check_gradients({x, y, enc.attention.Wq[0], enc.feed_forward.W1, dec.cross_attention.Wk[1],
                                                dec.norm_self.gain, dec.feed_forward.b2},
                                               [&] {
                                                 const Tensor h = transformer_block(x, enc, MaskSpec::none(2, 3, 3), opt);
                                                 return probe_loss(decoder_block(y, h, dec, MaskSpec::causal(2, 2),
                                                                                 MaskSpec::none(2, 2, 3), opt));
                                               },
                                               rng));
  }

  // whole models at d=16, two layers, V=20, sequences of length 6
  for (Architecture arch : kAll) {
    ModelConfig cfg = testing::toy_config(arch, 20, 16, 2);
    const auto model = make_model(cfg, 7);
    const auto src = testing::random_sequences(2, 6, 6, 20, rng);
    const auto tgt = testing::random_sequences(2, 6, 6, 20, rng);
    const auto corpus = testing::make_corpus(src, tgt, 20);
    const std::vector<std::size_t> idx{0, 1};
    const Batch batch = make_batch(corpus, idx);
    note(architecture_name(arch), check_gradients(model->parameters().entries(),
                                                  [&] { return sequence_loss(*model, batch); }, rng, 12));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120,
          "max relative error " + fmt("%.2e", worst) + " at " + worst_name + ", " + fmt("%.1f", secs) + " s"};
}

// ---- 2 ------------------------------------------------------------------

Outcome cell_fixed_points() {
  std::mt19937_64 rng(2);
  double gru_err = 0, lstm_err = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t in = 1 + trial % 5, h = 1 + trial % 7;
    const Tensor x = random_tensor({3, in}, rng, 5.0, false);
    CellState gs{random_tensor({3, h}, rng, 2.0, false), {}};
    const CellState gn = gru_step(x, gs, CellParams::zeros(CellKind::kGru, in, h));
    for (std::size_t i = 0; i < gn.h.numel(); ++i) gru_err = std::max(gru_err, std::abs(gn.h[i] - 0.5 * gs.h[i]));

    CellState ls{random_tensor({3, h}, rng, 2.0, false), random_tensor({3, h}, rng, 2.0, false)};
    const CellState ln = lstm_step(x, ls, CellParams::zeros(CellKind::kLstm, in, h));
    for (std::size_t i = 0; i < ln.c.numel(); ++i) lstm_err = std::max(lstm_err, std::abs(ln.c[i] - 0.5 * ls.c[i]));
  }
  return {gru_err <= 1e-12 && lstm_err <= 1e-12,
          "GRU |h_t - h_{t-1}/2| max " + fmt("%.1e", gru_err) + ", LSTM |c_t - c_{t-1}/2| max " + fmt("%.1e", lstm_err)};
}

// ---- 3 ------------------------------------------------------------------

std::vector<MergePair> recount_bpe(const std::map<std::string, std::int64_t>& freqs, std::size_t num_merges) {
  std::vector<std::pair<std::vector<std::string>, std::int64_t>> words;
  for (const auto& [w, c] : freqs) words.push_back({initial_symbols(w), c});
  std::vector<MergePair> out;
  while (out.size() < num_merges) {
    std::map<MergePair, std::int64_t> counts;
    for (const auto& [syms, c] : words) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) counts[{syms[i], syms[i + 1]}] += c;
    }
    std::optional<MergePair> best;
    std::int64_t best_count = 1;
    for (const auto& [pair, c] : counts) {
      if (c > best_count) {
        best = pair;
        best_count = c;
      }
    }
    if (!best) break;
    out.push_back(*best);
    for (auto& [syms, c] : words) {
      std::vector<std::string> merged;
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == best->left && syms[i + 1] == best->right) {
          merged.push_back(best->left + best->right);
          i += 2;
        } else {
          merged.push_back(syms[i++]);
        }
      }
      syms = std::move(merged);
    }
  }
  return out;
}

std::string random_word(std::mt19937_64& rng, const std::vector<std::string>& alphabet, std::size_t max_len) {
  const std::size_t len = std::uniform_int_distribution<std::size_t>(1, max_len)(rng);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::string w;
  for (std::size_t i = 0; i < len; ++i) w += alphabet[pick(rng)];
  return w;
}

Outcome bpe_equivalence() {
  std::mt19937_64 rng(3);
  const std::vector<std::string> alphabet{"a", "b", "c", "d", "e", "\xc3\xa9", "\xe0\xa4\x95", "@"};
  int mismatched = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::map<std::string, std::int64_t> freqs;
    const int words = std::uniform_int_distribution<int>(1, 200)(rng);
    for (int i = 0; i < words; ++i) freqs[random_word(rng, alphabet, 7)] += std::uniform_int_distribution<int>(1, 5)(rng);
    const std::size_t merges = std::uniform_int_distribution<std::size_t>(1, 80)(rng);
    mismatched += learn_bpe(freqs, merges).merges() != recount_bpe(freqs, merges);
  }
  std::map<std::string, std::int64_t> freqs;
  for (int i = 0; i < 300; ++i) freqs[random_word(rng, alphabet, 8)] += 2;
  const MergeTable table = learn_bpe(freqs, 200);
  int lossy = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::string w = random_word(rng, alphabet, 12);
    lossy += decode_bpe(apply_bpe(w, table)) != w;
  }
  return {mismatched == 0 && lossy == 0, std::to_string(50 - mismatched) + "/50 merge tables equal the recount oracle, " +
                                             std::to_string(10000 - lossy) + "/10000 words round-trip"};
}

// ---- 4 ------------------------------------------------------------------

struct RowStats {
  std::size_t rows = 0;
  double worst_sum = 0;
  bool in_range = true;

  void add_row(std::span<const Real> row) {
    double s = 0;
    for (Real v : row) {
      s += v;
      in_range = in_range && v >= 0.0 && v <= 1.0;
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    ++rows;
  }
  void add_matrix(const AttentionMatrix& m) {
    for (const auto& r : m.weights) add_row(r);
  }
  void add_tensor(const Tensor& t) {
    const std::size_t width = t.shape().back();
    for (std::size_t i = 0; i < t.numel(); i += width) add_row(t.data().subspan(i, width));
  }
};

/// A few hundred steps on the copy task, enough to move attention away from its initial spread.
std::unique_ptr<Model> briefly_trained(Architecture arch) {
  const auto data = synth_task(SynthKind::kCopy, 10, {3, 7}, 400, 4);
  ModelConfig cfg = testing::toy_config(arch, data.source_vocab->size(), 32, 1);
  cfg.max_decode_len = 10;
  auto model = make_model(cfg, 4);
  TrainConfig tc;
  tc.steps = 200;
  tc.batch_size = 32;
  tc.eval_every = 0;
  tc.adam.learning_rate = 3e-3;
  train(*model, data, nullptr, tc);
  return model;
}

Outcome attention_stochasticity() {
  std::mt19937_64 rng(4);
  RowStats st;
  for (int trial = 0; trial < 20; ++trial) {
    const AttentionParams p = AttentionParams::init(5, 6, 7, rng);
    const Tensor enc = random_tensor({3, 6, 6}, rng, 3.0, false);
    std::vector<std::uint8_t> mask(18, 1);
    mask[5] = mask[11] = mask[10] = 0;
    st.add_tensor(AdditiveAttention(p, enc, mask).attend(random_tensor({3, 5}, rng, 3.0, false)).first);

    const TransformerBlockParams blk = TransformerBlockParams::init(8, 4, 16, rng);
    std::vector<Tensor> trace;
    BlockOptions opt;
    opt.heads = 4;
    opt.attention_trace = &trace;
    const std::vector<std::uint8_t> keys{1, 1, 1, 0, 1, 1, 1, 1};
    transformer_block(random_tensor({8, 8}, rng, 2.0, false), blk, MaskSpec::padding(keys, 2, 4, 4), opt);
    for (const auto& t : trace) st.add_tensor(t);
  }
  std::size_t models = 0;
  for (Architecture arch : {Architecture::kAttnGru, Architecture::kTransformer}) {
    const auto fresh = make_model(testing::toy_config(arch), 5);
    const auto trained = briefly_trained(arch);
    for (const Model* m : {fresh.get(), trained.get()}) {
      ++models;
      const int v = static_cast<int>(std::min(m->config().source_vocab, m->config().target_vocab));
      for (int trial = 0; trial < 10; ++trial) {
        const TokenIds src = encoder_input(testing::random_sequences(1, 1, 8, v, rng)[0]);
        const TokenIds tgt = testing::random_sequences(1, 1, 8, v, rng)[0];
        for (const auto& mat : m->extract_attention(src, tgt)) st.add_matrix(mat);
      }
    }
  }
  return {st.worst_sum <= 1e-6 && st.in_range,
          std::to_string(st.rows) + " rows over layers, heads and " + std::to_string(models) +
              " random or trained models; max |row sum - 1| " + fmt("%.1e", st.worst_sum) +
              (st.in_range ? ", all entries in [0,1]" : ", entries outside [0,1]")};
}

// ---- 5 ------------------------------------------------------------------

Outcome transformer_causality() {
  std::mt19937_64 rng(5);
  const auto model = make_model(testing::toy_config(Architecture::kTransformer, 20, 16, 2), 5);
  std::size_t violations = 0, later_changes = 0, checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto src = testing::random_sequences(1, 1, 8, 20, rng);
    const auto tgt = testing::random_sequences(1, 2, 8, 20, rng);
    const auto corpus = testing::make_corpus(src, tgt, 20);
    const std::vector<std::size_t> idx{0};
    Batch batch = make_batch(corpus, idx);
    const std::size_t T = batch.target_len - 1;  // decoder inputs: BOS and the target tokens
    const std::size_t V = model->config().target_vocab;
    const Tensor base = model->forward(batch, {});
    const std::size_t p = std::uniform_int_distribution<std::size_t>(1, T - 1)(rng);
    const int old = batch.target[p];
    batch.target[p] = kNumSpecial + (old - kNumSpecial + 1) % (20 - kNumSpecial);
    const Tensor moved = model->forward(batch, {});
    for (std::size_t pos = 0; pos < T; ++pos) {
      bool same = true;
      for (std::size_t v = 0; v < V; ++v) same = same && base[pos * V + v] == moved[pos * V + v];
      if (pos < p) violations += !same;
      if (pos >= p) later_changes += !same;
    }
    ++checked;
  }
  return {violations == 0 && later_changes > 0,
          std::to_string(checked) + " mutated pairs, " + std::to_string(violations) +
              " earlier positions changed, " + std::to_string(later_changes) + " later positions changed"};
}

// ---- 6 ------------------------------------------------------------------

std::vector<Real> next_log_probs(const Model& m, const TokenIds& src, const TokenIds& prefix) {
  NoGradGuard guard;
  auto state = m.start(encoder_input(src));
  Tensor logits;
  for (int t : prefix) logits = m.step(*state, t);
  return next_token_log_probs(logits);
}

Outcome decode_consistency() {
  std::mt19937_64 rng(6);
  std::size_t greedy_mismatch = 0, greedy_total = 0;
  for (Architecture arch : kAll) {
    const auto model = make_model(testing::toy_config(arch), 6);
    for (const auto& s : testing::random_sequences(100, 1, 7, 20, rng)) {
      greedy_mismatch += beam_decode(*model, s, 1, 8, 0.0) != greedy_decode(*model, s, 8);
      ++greedy_total;
    }
  }
  std::size_t exhaustive_mismatch = 0, exhaustive_total = 0;
  for (Architecture arch : kAll) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto model = make_model(testing::toy_config(arch, 6, 8, 1), seed);
      const TokenIds src = testing::random_sequences(1, 1, 4, 6, rng)[0];
      TokenIds best;
      Real best_score = -std::numeric_limits<Real>::infinity();
      const auto lp1 = next_log_probs(*model, src, {kBos});
      for (int a = 0; a < 6; ++a) {
        if (!std::isfinite(lp1[a])) continue;
        if (a == kEos) {
          if (lp1[a] > best_score) best_score = lp1[a], best = {};
          continue;
        }
        const auto lp2 = next_log_probs(*model, src, {kBos, a});
        for (int b = 0; b < 6; ++b) {
          if (!std::isfinite(lp2[b])) continue;
          if (lp1[a] + lp2[b] > best_score) {
            best_score = lp1[a] + lp2[b];
            best = b == kEos ? TokenIds{a} : TokenIds{a, b};
          }
        }
      }
      exhaustive_mismatch += beam_decode(*model, src, 6, 2, 0.0) != best;
      ++exhaustive_total;
    }
  }
  return {greedy_mismatch == 0 && exhaustive_mismatch == 0,
          "beam=1 vs greedy " + std::to_string(greedy_total - greedy_mismatch) + "/" + std::to_string(greedy_total) +
              " identical; beam=6 vs exhaustive (V=6, max_len 2) " +
              std::to_string(exhaustive_total - exhaustive_mismatch) + "/" + std::to_string(exhaustive_total)};
}

// ---- 7 ------------------------------------------------------------------

Sentence words(const std::string& s) { return split_whitespace(s); }

Outcome bleu_oracle() {
  const double short_hyp = corpus_bleu({words("the cat")}, {words("the cat sat")}, 2, Smoothing::kNone).score;
  const double six = corpus_bleu({words("the the cat sat on mat")}, {words("the cat sat on the mat")}, 4,
                                 Smoothing::kNone).score;
  const double six_smooth = corpus_bleu({words("the the cat sat on mat")}, {words("the cat sat on the mat")}, 4,
                                        Smoothing::kAddOne).score;
  const std::vector<Sentence> corpus{words("a b c d"), words("the cat sat on the mat"), words("x")};
  const double same = corpus_bleu(corpus, corpus, 4, Smoothing::kNone).score;
  const double same_smooth = corpus_bleu(corpus, corpus, 4, Smoothing::kAddOne).score;
  const bool ok = std::abs(short_hyp - 0.6065) < 1e-4 && std::abs(six - 0.5623) < 1e-4 &&
                  std::abs(six_smooth - 0.6687) < 1e-4 && same == 1.0 && same_smooth == 1.0;
  return {ok, "'the cat' vs 'the cat sat' " + fmt("%.4f", short_hyp) + " (0.6065), 6-word fixture " + fmt("%.4f", six) +
                  " (0.5623), add-one " + fmt("%.4f", six_smooth) + " (0.6687), identical corpora " +
                  fmt("%.17g", same)};
}

// ---- 8 ------------------------------------------------------------------

struct ConvergenceRun {
  double accuracy = 0;
  double bleu = 0;
};

/// Shared toy setup for every architecture; only the learning rate schedule differs.
ModelConfig reverse_task_config(Architecture arch, std::size_t vocab) {
  ModelConfig c = ModelConfig::defaults(arch);
  c.d_model = 64;
  c.encoder_layers = c.decoder_layers = 2;
  c.heads = 4;
  c.d_ff = 128;
  c.dropout = 0.1;
  c.attention_dropout = 0.0;
  c.residual_dropout = 0.1;
  c.source_vocab = c.target_vocab = vocab;
  c.max_decode_len = 12;
  return c;
}

TrainConfig reverse_task_training(Architecture arch, std::uint64_t seed) {
  TrainConfig t;
  t.steps = 2000;
  t.batch_size = 32;
  t.eval_every = 0;
  t.seed = seed;
  switch (arch) {
    case Architecture::kSeq2SeqLstm: t.adam.learning_rate = 3e-3; break;
    case Architecture::kAttnGru: t.adam.learning_rate = 1e-3; break;
    case Architecture::kTransformer: t.adam.learning_rate = 2e-3; break;
  }
  t.adam.warmup_steps = arch == Architecture::kTransformer ? 200 : 0;
  return t;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

Outcome toy_convergence() {
  const auto t0 = Clock::now();
  const auto train_set = synth_task(SynthKind::kReverse, 20, {5, 10}, 5000, 101);
  const auto test_set = synth_task(SynthKind::kReverse, 20, {5, 10}, 500, 202);
  std::map<Architecture, std::vector<double>> acc, bleu;
  for (Architecture arch : kAll) {
    for (std::uint64_t seed : {1, 2, 3}) {
      const auto model = make_model(reverse_task_config(arch, train_set.source_vocab->size()), seed);
      train(*model, train_set, nullptr, reverse_task_training(arch, seed));
      const auto hyps = translate_corpus(*model, test_set.source, 1, 12);
      acc[arch].push_back(token_accuracy(hyps, test_set.target));
      bleu[arch].push_back(100.0 * corpus_bleu_ids(hyps, test_set.target, *test_set.target_vocab, Smoothing::kNone).score);
      std::fprintf(stderr, "  %s seed %llu: accuracy %.4f BLEU %.2f (%.0f s elapsed)\n", architecture_name(arch).c_str(),
                   static_cast<unsigned long long>(seed), acc[arch].back(), bleu[arch].back(), seconds_since(t0));
    }
  }
  const double secs = seconds_since(t0);
  const double t = median3(bleu[Architecture::kTransformer]), g = median3(bleu[Architecture::kAttnGru]),
               l = median3(bleu[Architecture::kSeq2SeqLstm]);
  bool ok = t >= g && g >= l && t - l >= 2.0 && secs < 1800;
  std::string detail;
  for (Architecture arch : kAll) {
    const double a = median3(acc[arch]);
    ok = ok && a >= 0.90;
    detail += architecture_name(arch) + " acc " + fmt("%.4f", a) + " BLEU " + fmt("%.2f", median3(bleu[arch])) + "; ";
  }
  return {ok, detail + fmt("%.0f s", secs)};
}

// ---- 9 ------------------------------------------------------------------

/// Element counts written out from the layer shapes.
std::size_t analytic_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff, vs = c.source_vocab, vt = c.target_vocab;
  const std::size_t embeddings = vs * d + vt * d;
  const std::size_t output = (c.tie_embeddings ? 0 : vt * d) + vt;
  auto gru = [](std::size_t in, std::size_t h) { return 3 * (in * h + h * h + h); };
  auto lstm = [](std::size_t in, std::size_t h) { return 4 * (in * h + h * h + h); };
  std::size_t body = 0;
  switch (c.arch) {
    case Architecture::kSeq2SeqLstm:
      body = (c.encoder_layers + c.decoder_layers) * lstm(d, d);
      break;
    case Architecture::kAttnGru:
      body = 2 * gru(d, d) + (c.encoder_layers - 1) * 2 * gru(2 * d, d)  // bidirectional encoder
             + gru(3 * d, d) + (c.decoder_layers - 1) * gru(d, d)         // decoder stack
             + c.decoder_layers * d * d                                   // initial-state maps
             + (d * d + d * 2 * d + d);                                   // W_a, U_a, v_a
      break;
    case Architecture::kTransformer:
      body = c.encoder_layers * (4 * d * d + 2 * d * f + 4 * d + f + d + 4 * d) +
             c.decoder_layers * (8 * d * d + 2 * d * f + 8 * d + f + d + 6 * d) + 4 * d;
      break;
  }
  return embeddings + output + body;
}

Outcome parameter_counts() {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> pick_d(1, 8), pick_layers(1, 4), pick_vocab(5, 300), pick_heads(1, 4),
      pick_ff(1, 64);
  std::size_t equal = 0, total = 0;
  for (int trial = 0; trial < 20; ++trial) {
    for (Architecture arch : kAll) {
      ModelConfig c = ModelConfig::defaults(arch);
      c.heads = pick_heads(rng);
      c.d_model = 2 * c.heads * pick_d(rng);
      c.d_ff = pick_ff(rng);
      c.encoder_layers = pick_layers(rng);
      c.decoder_layers = pick_layers(rng);
      c.source_vocab = pick_vocab(rng);
      c.target_vocab = pick_vocab(rng);
      c.tie_embeddings = trial % 4 == 0;
      const auto model = make_model(c, 1 + trial);
      const std::size_t expected = analytic_count(c);
      equal += model->count_parameters() == expected && expected_parameter_count(c) == expected;
      ++total;
    }
  }
  return {equal == total, std::to_string(equal) + "/" + std::to_string(total) + " random configs match exactly"};
}

// ---- 10 -----------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome train_determinism() {
#ifndef NMTFORGE_BIN
  return {false, "built without the command-line tool"};
#else
  const fs::path dir = fs::temp_directory_path() / "nmtforge_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto data = synth_task(SynthKind::kReverse, 12, {3, 8}, 300, 10);
  std::ofstream src(dir / "train.src"), tgt(dir / "train.tgt");
  for (std::size_t i = 0; i < data.size(); ++i) {
    src << ids_to_line(*data.source_vocab, data.source[i]) << '\n';
    tgt << ids_to_line(*data.target_vocab, data.target[i]) << '\n';
  }
  src.close();
  tgt.close();
  std::ofstream(dir / "run.cfg") << "d_model = 32\nlayers = 2\nheads = 4\nd_ff = 64\nbatch_size = 16\neval_every = 20\n";

  std::string outputs[2][3];
  for (int r = 0; r < 2; ++r) {
    const fs::path out = dir / ("run" + std::to_string(r));
    const std::string cmd = std::string("NMTF_THREADS=1 '") + NMTFORGE_BIN + "' train --arch transformer --config '" +
                            (dir / "run.cfg").string() + "' --data-src '" + (dir / "train.src").string() +
                            "' --data-tgt '" + (dir / "train.tgt").string() + "' --valid-src '" +
                            (dir / "train.src").string() + "' --valid-tgt '" + (dir / "train.tgt").string() +
                            "' --seed 17 --steps 60 --out-dir '" + out.string() + "' >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) return {false, "training run exited abnormally"};
    outputs[r][0] = slurp(out / "report.tsv");
    outputs[r][1] = slurp(out / "model.nmtf");
    outputs[r][2] = slurp(out / "last.nmtf");
  }
  const bool tsv = outputs[0][0] == outputs[1][0] && !outputs[0][0].empty();
  const bool best = outputs[0][1] == outputs[1][1] && !outputs[0][1].empty();
  const bool last = outputs[0][2] == outputs[1][2] && !outputs[0][2].empty();
  return {tsv && best && last, std::string("report.tsv ") + (tsv ? "identical" : "differs") + ", model.nmtf " +
                                   (best ? "identical" : "differs") + ", last.nmtf " + (last ? "identical" : "differs")};
#endif
}

}  // namespace

int main() {
  run_criterion(1, "gradient integrity", gradient_integrity);
  run_criterion(2, "cell fixed points", cell_fixed_points);
  run_criterion(3, "BPE oracle equivalence", bpe_equivalence);
  run_criterion(4, "attention stochasticity", attention_stochasticity);
  run_criterion(5, "transformer causality", transformer_causality);
  run_criterion(6, "decode consistency", decode_consistency);
  run_criterion(7, "BLEU oracle", bleu_oracle);
  run_criterion(8, "toy-task convergence", toy_convergence);
  run_criterion(9, "parameter-count closed forms", parameter_counts);
  run_criterion(10, "training determinism", train_determinism);
  return failures == 0 ? 0 : 1;
}
