#include "nmt/bpe.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_set>

#include "nmt/error.hpp"

namespace nmt {

namespace {

std::string pair_key(const std::string& left, const std::string& right) {
  std::string key;
  key.reserve(left.size() + right.size() + 1);
  key.append(left).push_back('\x1f');
  key.append(right);
  return key;
}

/// Merges every non-overlapping occurrence of (left, right), scanning left to right.
bool merge_in_place(std::vector<std::string>& symbols, const std::string& left, const std::string& right) {
  bool changed = false;
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size();) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(left + right);
      i += 2;
      changed = true;
    } else {
      out.push_back(std::move(symbols[i]));
      ++i;
    }
  }
  symbols = std::move(out);
  return changed;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

MergeTable::MergeTable(std::vector<MergePair> merges) : merges_(std::move(merges)) {
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    auto [it, inserted] = ranks_.emplace(pair_key(merges_[i].left, merges_[i].right), i);
    if (!inserted) {
      throw ConfigError("duplicate merge pair '" + merges_[i].left + " " + merges_[i].right + "'");
    }
  }
}

std::ptrdiff_t MergeTable::rank(const std::string& left, const std::string& right) const {
  auto it = ranks_.find(pair_key(left, right));
  return it == ranks_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
}

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> chars;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if ((lead & 0xE0) == 0xC0) {
      len = 2;
    } else if ((lead & 0xF0) == 0xE0) {
      len = 3;
    } else if ((lead & 0xF8) == 0xF0) {
      len = 4;
    }
    if (i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    chars.emplace_back(text.substr(i, len));
    i += len;
  }
  return chars;
}

std::vector<std::string> initial_symbols(std::string_view word) {
  auto symbols = utf8_chars(word);
  if (!symbols.empty()) symbols.back() += kEndOfWord;
  return symbols;
}

MergeTable learn_bpe(const std::map<std::string, std::int64_t>& word_frequencies, std::size_t num_merges) {
  if (num_merges == 0) throw ConfigError("learn_bpe: number of merges must be positive");
  if (word_frequencies.empty()) throw ConfigError("learn_bpe: empty word counts");

  struct Word {
    std::vector<std::string> symbols;
    std::int64_t count;
  };
  std::vector<Word> words;
  for (const auto& [word, count] : word_frequencies) {
    if (word.empty() || count <= 0) continue;
    words.push_back({initial_symbols(word), count});
  }

  // Pair statistics with an ordered index for (highest count, smallest pair).
  std::map<MergePair, std::int64_t> counts;
  std::map<MergePair, std::unordered_set<std::size_t>> where;
  using Entry = std::tuple<std::int64_t, MergePair>;  // (-count, pair)
  std::set<Entry> ranking;

  auto adjust = [&](const MergePair& pair, std::int64_t delta, std::size_t word_index) {
    auto& c = counts[pair];
    if (c > 0) ranking.erase({-c, pair});
    c += delta;
    if (c > 0) {
      ranking.insert({-c, pair});
    } else {
      counts.erase(pair);
    }
    if (delta > 0) where[pair].insert(word_index);
  };

  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto& s = words[w].symbols;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) adjust({s[i], s[i + 1]}, words[w].count, w);
  }

  std::vector<MergePair> merges;
  while (merges.size() < num_merges && !ranking.empty()) {
    const auto [neg_count, best] = *ranking.begin();
    if (-neg_count < 2) break;
    merges.push_back(best);
    const auto affected = where[best];
    for (std::size_t w : affected) {
      auto& s = words[w].symbols;
      const std::int64_t c = words[w].count;
      for (std::size_t i = 0; i + 1 < s.size(); ++i) adjust({s[i], s[i + 1]}, -c, w);
      merge_in_place(s, best.left, best.right);
      for (std::size_t i = 0; i + 1 < s.size(); ++i) adjust({s[i], s[i + 1]}, c, w);
    }
    where.erase(best);
  }
  return MergeTable(std::move(merges));
}

std::vector<std::string> apply_bpe(std::string_view word, const MergeTable& merges) {
  auto symbols = initial_symbols(word);
  // Sequential application in table order: after applying rank r, only
  // ranks above r are eligible.
  std::ptrdiff_t cursor = 0;
  while (symbols.size() > 1) {
    std::ptrdiff_t best = -1;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const std::ptrdiff_t r = merges.rank(symbols[i], symbols[i + 1]);
      if (r >= cursor && (best < 0 || r < best)) best = r;
    }
    if (best < 0) break;
    const auto& pair = merges.merges()[static_cast<std::size_t>(best)];
    merge_in_place(symbols, pair.left, pair.right);
    cursor = best + 1;
  }
  auto& last = symbols.back();
  if (ends_with(last, kEndOfWord)) last.resize(last.size() - kEndOfWord.size());
  for (std::size_t i = 0; i + 1 < symbols.size(); ++i) symbols[i] += kContinuation;
  return symbols;
}

std::string decode_bpe(const std::vector<std::string>& tokens) {
  std::string word;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::string_view t = tokens[i];
    if (i + 1 < tokens.size() && ends_with(t, kContinuation)) t.remove_suffix(kContinuation.size());
    word.append(t);
  }
  return word;
}

std::vector<std::string> merge_subwords(const std::vector<std::string>& tokens) {
  std::vector<std::string> words;
  std::string pending;
  bool open = false;
  for (const auto& t : tokens) {
    if (ends_with(t, kContinuation)) {
      pending.append(t, 0, t.size() - kContinuation.size());
      open = true;
    } else {
      pending.append(t);
      words.push_back(std::move(pending));
      pending.clear();
      open = false;
    }
  }
  if (open) words.push_back(std::move(pending));
  return words;
}

std::vector<std::string> split_whitespace(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::vector<std::string> pretokenize(std::string_view line) {
  std::vector<std::string> out;
  for (const auto& chunk : split_whitespace(line)) {
    std::string current;
    for (char ch : chunk) {
      const auto uch = static_cast<unsigned char>(ch);
      if (uch < 0x80 && std::ispunct(uch)) {
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
        out.emplace_back(1, ch);
      } else {
        current.push_back(ch);
      }
    }
    if (!current.empty()) out.push_back(std::move(current));
  }
  return out;
}

std::map<std::string, std::int64_t> count_words(const std::vector<std::string>& lines) {
  std::map<std::string, std::int64_t> counts;
  for (const auto& line : lines) {
    for (auto& w : pretokenize(line)) ++counts[w];
  }
  return counts;
}

std::string format_merges(const MergeTable& merges) {
  std::string text = "#version: nmt-forge-bpe 1\n";
  for (const auto& m : merges.merges()) text += m.left + " " + m.right + "\n";
  return text;
}

void save_merges(const std::filesystem::path& path, const MergeTable& merges) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write merges file " + path.string());
  out << format_merges(merges);
  if (!out) throw IoError("failed writing merges file " + path.string());
}

MergeTable load_merges(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open merges file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("#version:", 0) != 0) {
    throw IoError(path.string() + ": missing '#version:' header");
  }
  std::vector<MergePair> merges;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto space = line.find(' ');
    if (space == std::string::npos || space == 0 || space + 1 == line.size() ||
        line.find(' ', space + 1) != std::string::npos) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 'left right'");
    }
    merges.push_back({line.substr(0, space), line.substr(space + 1)});
  }
  return MergeTable(std::move(merges));
}

const std::vector<std::string>& BpeEncoder::encode_word(const std::string& word) {
  auto it = cache_.find(word);
  if (it == cache_.end()) it = cache_.emplace(word, apply_bpe(word, merges_)).first;
  return it->second;
}

std::vector<std::string> BpeEncoder::encode_line(std::string_view line) {
  std::vector<std::string> out;
  for (const auto& w : pretokenize(line)) {
    const auto& pieces = encode_word(w);
    out.insert(out.end(), pieces.begin(), pieces.end());
  }
  return out;
}

// ---- vocabulary -----------------------------------------------------------

const std::vector<std::string>& Vocabulary::special_tokens() {
  static const std::vector<std::string> tokens = {"<pad>", "<unk>", "<s>", "</s>"};
  return tokens;
}

Vocabulary::Vocabulary() {
  for (const auto& t : special_tokens()) add(t);
}

int Vocabulary::add(const std::string& token, std::int64_t frequency) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  freqs_.push_back(frequency);
  ids_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (int i : ids) tokens.push_back(token(i));
  return tokens;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  for (std::size_t i = kNumSpecial; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << freqs_[i] << '\n';
  if (!out) throw IoError("failed writing vocabulary " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  Vocabulary vocab;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 'token<TAB>frequency'");
    }
    std::int64_t freq = 0;
    try {
      freq = std::stoll(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad frequency");
    }
    vocab.add(line.substr(0, tab), freq);
  }
  return vocab;
}

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus) {
  std::unordered_map<std::string, std::int64_t> counts;
  std::size_t total = 0;
  const auto& reserved = Vocabulary::special_tokens();
  for (const auto& sentence : corpus) {
    for (const auto& tok : sentence) {
      ++total;
      if (std::find(reserved.begin(), reserved.end(), tok) != reserved.end()) continue;
      ++counts[tok];
    }
  }
  if (total == 0) throw ConfigError("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::int64_t>> ordered(counts.begin(), counts.end());
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary vocab;
  for (const auto& [tok, freq] : ordered) vocab.add(tok, freq);
  return vocab;
}

}  // namespace nmt
