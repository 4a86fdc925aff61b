#include "nmt/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "nmt/bpe.hpp"
#include "nmt/error.hpp"

namespace nmt {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::int64_t>;

NgramCounts count_ngrams(const Sentence& s, std::size_t n) {
  NgramCounts counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Sentence(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

/// Adds sentence-level clipped matches and totals for every order up to max_n.
void accumulate(const Sentence& hyp, const std::vector<Sentence>& refs, std::size_t max_n,
                std::vector<std::int64_t>& matches, std::vector<std::int64_t>& totals) {
  for (std::size_t n = 1; n <= max_n; ++n) {
    const NgramCounts h = count_ngrams(hyp, n);
    NgramCounts ceiling;
    for (const auto& r : refs) {
      for (const auto& [gram, c] : count_ngrams(r, n)) ceiling[gram] = std::max(ceiling[gram], c);
    }
    for (const auto& [gram, c] : h) {
      totals[n - 1] += c;
      auto it = ceiling.find(gram);
      if (it != ceiling.end()) matches[n - 1] += std::min(c, it->second);
    }
  }
}

std::int64_t closest_ref_length(std::size_t hyp_len, const std::vector<Sentence>& refs) {
  std::int64_t best = -1;
  std::int64_t best_gap = 0;
  for (const auto& r : refs) {
    const auto len = static_cast<std::int64_t>(r.size());
    const std::int64_t gap = std::llabs(len - static_cast<std::int64_t>(hyp_len));
    if (best < 0 || gap < best_gap || (gap == best_gap && len < best)) {
      best = len;
      best_gap = gap;
    }
  }
  return std::max<std::int64_t>(best, 0);
}

}  // namespace

Smoothing parse_smoothing(const std::string& name) {
  if (name == "none") return Smoothing::kNone;
  if (name == "add-one" || name == "add1") return Smoothing::kAddOne;
  throw ConfigError("unknown smoothing '" + name + "' (valid: none, add-one)");
}

std::string smoothing_name(Smoothing smoothing) { return smoothing == Smoothing::kNone ? "none" : "add-one"; }

BleuBreakdown corpus_bleu(const std::vector<Sentence>& hypotheses,
                          const std::vector<std::vector<Sentence>>& references, std::size_t max_n,
                          Smoothing smoothing) {
  if (hypotheses.size() != references.size()) {
    throw AlignmentError("BLEU needs one reference set per hypothesis: " + std::to_string(hypotheses.size()) +
                         " hypotheses vs " + std::to_string(references.size()) + " references");
  }
  if (max_n == 0) throw ConfigError("BLEU max_n must be at least 1");
  BleuBreakdown b;
  b.max_n = max_n;
  b.matches.assign(max_n, 0);
  b.totals.assign(max_n, 0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    if (references[i].empty()) throw AlignmentError("hypothesis " + std::to_string(i) + " has no reference");
    accumulate(hypotheses[i], references[i], max_n, b.matches, b.totals);
    b.hyp_len += static_cast<std::int64_t>(hypotheses[i].size());
    b.ref_len += closest_ref_length(hypotheses[i].size(), references[i]);
  }

  b.precisions.assign(max_n, std::nullopt);
  double log_sum = 0.0;
  std::size_t orders = 0;
  bool zero = false;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (b.totals[n] == 0) continue;
    double p = static_cast<double>(b.matches[n]) / static_cast<double>(b.totals[n]);
    if (smoothing == Smoothing::kAddOne && n >= 1) {
      p = static_cast<double>(b.matches[n] + 1) / static_cast<double>(b.totals[n] + 1);
    }
    b.precisions[n] = p;
    ++orders;
    if (p == 0.0) {
      zero = true;
    } else {
      log_sum += std::log(p);
    }
  }

  if (b.hyp_len == 0) {
    b.brevity_penalty = 0.0;
  } else if (b.hyp_len < b.ref_len) {
    b.brevity_penalty = std::exp(1.0 - static_cast<double>(b.ref_len) / static_cast<double>(b.hyp_len));
  } else {
    b.brevity_penalty = 1.0;
  }
  b.score = (orders == 0 || zero) ? 0.0 : b.brevity_penalty * std::exp(log_sum / static_cast<double>(orders));
  return b;
}

BleuBreakdown corpus_bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                          std::size_t max_n, Smoothing smoothing) {
  std::vector<std::vector<Sentence>> refs;
  refs.reserve(references.size());
  for (const auto& r : references) refs.push_back({r});
  return corpus_bleu(hypotheses, refs, max_n, smoothing);
}

std::optional<double> ngram_precision(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                                      std::size_t n) {
  if (n == 0) throw ConfigError("n-gram order must be at least 1");
  if (hypotheses.size() != references.size()) {
    throw AlignmentError("ngram_precision: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                         std::to_string(references.size()) + " references");
  }
  std::vector<std::int64_t> matches(n, 0), totals(n, 0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) accumulate(hypotheses[i], {references[i]}, n, matches, totals);
  if (totals[n - 1] == 0) return std::nullopt;
  return static_cast<double>(matches[n - 1]) / static_cast<double>(totals[n - 1]);
}

Sentence bleu_tokens(std::string_view line) { return merge_subwords(split_whitespace(line)); }

std::string format_bleu(const BleuBreakdown& b) {
  char buf[64];
  std::string out;
  std::snprintf(buf, sizeof(buf), "BLEU = %.2f (", b.score * 100.0);
  out += buf;
  for (std::size_t n = 0; n < b.precisions.size(); ++n) {
    if (n) out += '/';
    if (b.precisions[n]) {
      std::snprintf(buf, sizeof(buf), "%.1f", *b.precisions[n] * 100.0);
      out += buf;
    } else {
      out += "n/a";
    }
  }
  std::snprintf(buf, sizeof(buf), ", BP=%.3f, ratio=%.3f, hyp_len=%lld, ref_len=%lld)", b.brevity_penalty, b.ratio(),
                static_cast<long long>(b.hyp_len), static_cast<long long>(b.ref_len));
  out += buf;
  return out;
}

}  // namespace nmt
