#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nmt {

inline constexpr std::string_view kEndOfWord = "</w>";
inline constexpr std::string_view kContinuation = "@@";

struct MergePair {
  std::string left;
  std::string right;

  auto operator<=>(const MergePair&) const = default;
};

/// Ordered byte-pair merge operations. Order is learning order and is also
/// the only valid application order.
class MergeTable {
 public:
  MergeTable() = default;
  explicit MergeTable(std::vector<MergePair> merges);

  const std::vector<MergePair>& merges() const { return merges_; }
  std::size_t size() const { return merges_.size(); }
  bool empty() const { return merges_.empty(); }
  /// Position of a pair in the table, or -1.
  std::ptrdiff_t rank(const std::string& left, const std::string& right) const;

  bool operator==(const MergeTable& other) const { return merges_ == other.merges_; }

 private:
  std::vector<MergePair> merges_;
  std::unordered_map<std::string, std::size_t> ranks_;
};

/// Splits UTF-8 text into code points; invalid bytes become single units.
std::vector<std::string> utf8_chars(std::string_view text);

/// Initial symbol sequence for learning: characters with "</w>" fused onto the last.
std::vector<std::string> initial_symbols(std::string_view word);

/// Learns up to `num_merges` merges. Each step merges the most frequent
/// adjacent pair (ties to the lexicographically smallest (left, right));
/// learning stops early once no pair occurs at least twice.
MergeTable learn_bpe(const std::map<std::string, std::int64_t>& word_frequencies, std::size_t num_merges);

/// Segments one word; every token but the last carries the "@@" suffix.
std::vector<std::string> apply_bpe(std::string_view word, const MergeTable& merges);

/// Inverse of apply_bpe for a single word's tokens.
std::string decode_bpe(const std::vector<std::string>& tokens);

/// Joins "@@"-continued subwords of a tokenized sentence back into words.
std::vector<std::string> merge_subwords(const std::vector<std::string>& tokens);

/// Whitespace split with ASCII punctuation separated into its own tokens.
std::vector<std::string> pretokenize(std::string_view line);
std::vector<std::string> split_whitespace(std::string_view line);

/// Word counts over whitespace/punctuation-split lines.
std::map<std::string, std::int64_t> count_words(const std::vector<std::string>& lines);

/// Merges file: "#version: nmt-forge-bpe 1" then "left right" per line.
void save_merges(const std::filesystem::path& path, const MergeTable& merges);
MergeTable load_merges(const std::filesystem::path& path);
std::string format_merges(const MergeTable& merges);

/// Caches per-word segmentations of a fixed merge table.
class BpeEncoder {
 public:
  explicit BpeEncoder(MergeTable merges) : merges_(std::move(merges)) {}
  const std::vector<std::string>& encode_word(const std::string& word);
  std::vector<std::string> encode_line(std::string_view line);
  const MergeTable& merges() const { return merges_; }

 private:
  MergeTable merges_;
  std::unordered_map<std::string, std::vector<std::string>> cache_;
};

// ---- vocabulary -----------------------------------------------------------

enum SpecialToken : int { kPad = 0, kUnk = 1, kBos = 2, kEos = 3 };
inline constexpr int kNumSpecial = 4;

/// Bijection between tokens and dense ids; ids 0..3 are PAD, UNK, BOS, EOS.
class Vocabulary {
 public:
  Vocabulary();

  static const std::vector<std::string>& special_tokens();

  /// Appends a token (no-op if present). Returns its id.
  int add(const std::string& token, std::int64_t frequency = 0);
  int id(const std::string& token) const;  // UNK when unseen
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(int id) const;
  std::int64_t frequency(int id) const { return freqs_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  /// One "token<TAB>frequency" line per non-reserved token, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_ && freqs_ == other.freqs_; }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::int64_t> freqs_;
  std::unordered_map<std::string, int> ids_;
};

/// Reserved ids first, then tokens by descending frequency, ties lexicographic.
Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus);

}  // namespace nmt
