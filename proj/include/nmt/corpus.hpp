#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nmt/bpe.hpp"

namespace nmt {

using TokenIds = std::vector<int>;

/// Tokenized sentence pairs read from aligned text files.
struct ParallelText {
  std::vector<std::vector<std::string>> source;
  std::vector<std::vector<std::string>> target;
  std::size_t dropped = 0;  // pairs removed by the length/emptiness filter

  std::size_t size() const { return source.size(); }
};

/// Id-encoded sentence pairs (no BOS/EOS) plus the vocabularies used.
struct ParallelCorpus {
  std::vector<TokenIds> source;
  std::vector<TokenIds> target;
  std::shared_ptr<const Vocabulary> source_vocab;
  std::shared_ptr<const Vocabulary> target_vocab;

  std::size_t size() const { return source.size(); }
  ParallelCorpus subset(std::size_t begin, std::size_t end) const;
};

/// Padded id matrices for one mini-batch.
///
/// Source rows are `tokens EOS PAD...` (the encoder attends over I+1
/// positions); target rows are `BOS tokens EOS PAD...`.
struct Batch {
  std::size_t size = 0;
  std::size_t source_len = 0;
  std::size_t target_len = 0;
  std::vector<int> source;   // size x source_len
  std::vector<int> target;   // size x target_len
  std::vector<std::uint8_t> source_mask;
  std::vector<std::uint8_t> target_mask;
  std::vector<std::size_t> source_lengths;  // including EOS
  std::vector<std::size_t> target_lengths;  // including BOS and EOS
  std::vector<std::size_t> indices;         // rows' positions in the corpus

  std::span<const int> source_row(std::size_t b) const { return {source.data() + b * source_len, source_len}; }
  std::span<const int> target_row(std::size_t b) const { return {target.data() + b * target_len, target_len}; }
};

/// Reads line-aligned UTF-8 files. Pairs with an empty side or a side longer
/// than `max_len` whitespace tokens are dropped and counted.
ParallelText load_parallel(const std::filesystem::path& source_path, const std::filesystem::path& target_path,
                           std::size_t max_len);

std::vector<std::string> read_lines(const std::filesystem::path& path);

ParallelCorpus encode_corpus(const ParallelText& text, std::shared_ptr<const Vocabulary> source_vocab,
                             std::shared_ptr<const Vocabulary> target_vocab);

Batch make_batch(const ParallelCorpus& corpus, std::span<const std::size_t> indices);

/// Seeded shuffle, then (optionally) stable sort by source length and chunk
/// into batches; full batches are shuffled, a final short batch comes last.
std::vector<Batch> make_batches(const ParallelCorpus& corpus, std::size_t batch_size, std::uint64_t shuffle_seed,
                                bool sort_by_length = true);

/// Fraction of PAD cells across the source and target matrices.
double padding_fraction(const std::vector<Batch>& batches);

enum class SynthKind { kCopy, kReverse, kIncrement };

SynthKind parse_synth_kind(const std::string& name);
std::string synth_kind_name(SynthKind kind);

/// Applies the task transform to a symbol sequence (symbols in [0, vocab_size)).
std::vector<int> synth_transform(SynthKind kind, const std::vector<int>& symbols, int vocab_size);

/// Random symbol sequences and their transforms. Symbol s is the token
/// spelled as its decimal value and has id s + 4 in the shared vocabulary.
ParallelCorpus synth_task(SynthKind kind, int vocab_size, std::pair<std::size_t, std::size_t> length_range,
                          std::size_t n_pairs, std::uint64_t seed);

/// Splits a held-out set: first half validation, second half test.
std::pair<ParallelCorpus, ParallelCorpus> split_validation_test(const ParallelCorpus& held_out);

/// Ids to space-joined tokens, stopping at EOS and skipping PAD/BOS.
std::string ids_to_line(const Vocabulary& vocab, const TokenIds& ids);

}  // namespace nmt
