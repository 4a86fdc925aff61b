#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace nmt {

enum class Smoothing { kNone, kAddOne };

Smoothing parse_smoothing(const std::string& name);
std::string smoothing_name(Smoothing smoothing);

using Sentence = std::vector<std::string>;

/// Pooled clipped n-gram counts plus length totals.
struct BleuBreakdown {
  std::size_t max_n = 4;
  std::vector<std::int64_t> matches;  // clipped matches per order (index 0 is unigrams)
  std::vector<std::int64_t> totals;   // hypothesis n-grams per order
  std::vector<std::optional<double>> precisions;  // absent when the order has no hypothesis n-grams
  double brevity_penalty = 0.0;
  std::int64_t hyp_len = 0;
  std::int64_t ref_len = 0;
  double score = 0.0;  // in [0, 1]

  double ratio() const { return ref_len == 0 ? 0.0 : static_cast<double>(hyp_len) / static_cast<double>(ref_len); }
};

/// Corpus BLEU with several references per hypothesis. The brevity penalty
/// uses the reference length closest to each hypothesis (shorter on ties).
BleuBreakdown corpus_bleu(const std::vector<Sentence>& hypotheses,
                          const std::vector<std::vector<Sentence>>& references, std::size_t max_n = 4,
                          Smoothing smoothing = Smoothing::kNone);

BleuBreakdown corpus_bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                          std::size_t max_n = 4, Smoothing smoothing = Smoothing::kNone);

/// Clipped corpus precision for order n; empty when no hypothesis has n tokens.
std::optional<double> ngram_precision(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                                      std::size_t n);

/// Whitespace tokens with "@@" continuations joined back into words.
Sentence bleu_tokens(std::string_view line);

/// "BLEU = 60.65 (100.0/100.0, BP=0.607, ratio=0.667, hyp_len=2, ref_len=3)".
std::string format_bleu(const BleuBreakdown& bleu);

}  // namespace nmt
