#include "nmt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "nmt/error.hpp"

namespace nmt {

ParallelCorpus ParallelCorpus::subset(std::size_t begin, std::size_t end) const {
  ParallelCorpus out;
  end = std::min(end, size());
  begin = std::min(begin, end);
  out.source.assign(source.begin() + static_cast<std::ptrdiff_t>(begin), source.begin() + static_cast<std::ptrdiff_t>(end));
  out.target.assign(target.begin() + static_cast<std::ptrdiff_t>(begin), target.begin() + static_cast<std::ptrdiff_t>(end));
  out.source_vocab = source_vocab;
  out.target_vocab = target_vocab;
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

ParallelText load_parallel(const std::filesystem::path& source_path, const std::filesystem::path& target_path,
                           std::size_t max_len) {
  const auto src = read_lines(source_path);
  const auto tgt = read_lines(target_path);
  if (src.size() != tgt.size()) {
    throw AlignmentError("line counts differ: " + source_path.string() + " has " + std::to_string(src.size()) +
                         ", " + target_path.string() + " has " + std::to_string(tgt.size()));
  }
  ParallelText text;
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto s = split_whitespace(src[i]);
    auto t = split_whitespace(tgt[i]);
    if (s.empty() || t.empty() || s.size() > max_len || t.size() > max_len) {
      ++text.dropped;
      continue;
    }
    text.source.push_back(std::move(s));
    text.target.push_back(std::move(t));
  }
  return text;
}

ParallelCorpus encode_corpus(const ParallelText& text, std::shared_ptr<const Vocabulary> source_vocab,
                             std::shared_ptr<const Vocabulary> target_vocab) {
  ParallelCorpus corpus;
  for (std::size_t i = 0; i < text.size(); ++i) {
    corpus.source.push_back(source_vocab->encode(text.source[i]));
    corpus.target.push_back(target_vocab->encode(text.target[i]));
  }
  corpus.source_vocab = std::move(source_vocab);
  corpus.target_vocab = std::move(target_vocab);
  return corpus;
}

Batch make_batch(const ParallelCorpus& corpus, std::span<const std::size_t> indices) {
  Batch batch;
  batch.size = indices.size();
  for (std::size_t idx : indices) {
    if (idx >= corpus.size()) throw IndexError("batch index " + std::to_string(idx) + " outside corpus");
    batch.source_lengths.push_back(corpus.source[idx].size() + 1);
    batch.target_lengths.push_back(corpus.target[idx].size() + 2);
  }
  batch.source_len = *std::max_element(batch.source_lengths.begin(), batch.source_lengths.end());
  batch.target_len = *std::max_element(batch.target_lengths.begin(), batch.target_lengths.end());
  batch.source.assign(batch.size * batch.source_len, kPad);
  batch.target.assign(batch.size * batch.target_len, kPad);
  batch.source_mask.assign(batch.source.size(), 0);
  batch.target_mask.assign(batch.target.size(), 0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto& s = corpus.source[indices[b]];
    const auto& t = corpus.target[indices[b]];
    int* srow = batch.source.data() + b * batch.source_len;
    std::copy(s.begin(), s.end(), srow);
    srow[s.size()] = kEos;
    int* trow = batch.target.data() + b * batch.target_len;
    trow[0] = kBos;
    std::copy(t.begin(), t.end(), trow + 1);
    trow[t.size() + 1] = kEos;
    std::fill_n(batch.source_mask.begin() + static_cast<std::ptrdiff_t>(b * batch.source_len), s.size() + 1, 1);
    std::fill_n(batch.target_mask.begin() + static_cast<std::ptrdiff_t>(b * batch.target_len), t.size() + 2, 1);
  }
  batch.indices.assign(indices.begin(), indices.end());
  return batch;
}

std::vector<Batch> make_batches(const ParallelCorpus& corpus, std::size_t batch_size, std::uint64_t shuffle_seed,
                                bool sort_by_length) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);
  if (sort_by_length) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return corpus.source[a].size() < corpus.source[b].size(); });
  }
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                        order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  const bool has_short = !groups.empty() && groups.back().size() < batch_size;
  std::shuffle(groups.begin(), groups.end() - (has_short ? 1 : 0), rng);
  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& g : groups) batches.push_back(make_batch(corpus, g));
  return batches;
}

double padding_fraction(const std::vector<Batch>& batches) {
  std::size_t cells = 0, pads = 0;
  for (const auto& b : batches) {
    cells += b.source.size() + b.target.size();
    pads += static_cast<std::size_t>(std::count(b.source_mask.begin(), b.source_mask.end(), 0));
    pads += static_cast<std::size_t>(std::count(b.target_mask.begin(), b.target_mask.end(), 0));
  }
  return cells ? static_cast<double>(pads) / static_cast<double>(cells) : 0.0;
}

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "copy") return SynthKind::kCopy;
  if (name == "reverse") return SynthKind::kReverse;
  if (name == "increment") return SynthKind::kIncrement;
  throw ConfigError("unknown task kind '" + name + "' (expected copy, reverse or increment)");
}

std::string synth_kind_name(SynthKind kind) {
  switch (kind) {
    case SynthKind::kCopy: return "copy";
    case SynthKind::kReverse: return "reverse";
    case SynthKind::kIncrement: return "increment";
  }
  return "?";
}

std::vector<int> synth_transform(SynthKind kind, const std::vector<int>& symbols, int vocab_size) {
  std::vector<int> out = symbols;
  switch (kind) {
    case SynthKind::kCopy: break;
    case SynthKind::kReverse: std::reverse(out.begin(), out.end()); break;
    case SynthKind::kIncrement:
      for (int& s : out) s = (s + 1) % vocab_size;
      break;
  }
  return out;
}

ParallelCorpus synth_task(SynthKind kind, int vocab_size, std::pair<std::size_t, std::size_t> length_range,
                          std::size_t n_pairs, std::uint64_t seed) {
  if (vocab_size < 4) throw ConfigError("synthetic vocabulary size must be at least 4");
  if (n_pairs == 0) throw ConfigError("synthetic task needs at least one pair");
  const auto [min_len, max_len] = length_range;
  if (min_len == 0 || min_len > max_len) throw ConfigError("invalid synthetic length range");

  auto vocab = std::make_shared<Vocabulary>();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len_dist(min_len, max_len);
  std::uniform_int_distribution<int> sym_dist(0, vocab_size - 1);
  std::vector<std::int64_t> freq(static_cast<std::size_t>(vocab_size), 0);
  ParallelCorpus corpus;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    std::vector<int> symbols(len_dist(rng));
    for (int& s : symbols) s = sym_dist(rng);
    const auto target = synth_transform(kind, symbols, vocab_size);
    TokenIds src, tgt;
    for (int s : symbols) {
      src.push_back(s + kNumSpecial);
      ++freq[static_cast<std::size_t>(s)];
    }
    for (int s : target) {
      tgt.push_back(s + kNumSpecial);
      ++freq[static_cast<std::size_t>(s)];
    }
    corpus.source.push_back(std::move(src));
    corpus.target.push_back(std::move(tgt));
  }
  for (int s = 0; s < vocab_size; ++s) vocab->add(std::to_string(s), freq[static_cast<std::size_t>(s)]);
  corpus.source_vocab = vocab;
  corpus.target_vocab = vocab;
  return corpus;
}

std::pair<ParallelCorpus, ParallelCorpus> split_validation_test(const ParallelCorpus& held_out) {
  const std::size_t half = held_out.size() / 2;
  return {held_out.subset(0, half), held_out.subset(half, held_out.size())};
}

std::string ids_to_line(const Vocabulary& vocab, const TokenIds& ids) {
  std::string line;
  for (int id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    if (!line.empty()) line.push_back(' ');
    line += vocab.token(id);
  }
  return line;
}

}  // namespace nmt
