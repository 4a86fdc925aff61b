#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "nmt/corpus.hpp"
#include "nmt/error.hpp"
#include "support.hpp"

using namespace nmt;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path write(const std::string& name, const std::string& text) const {
    std::ofstream(path / name, std::ios::binary) << text;
    return path / name;
  }
};

}  // namespace

TEST_CASE("load_parallel counts and filtering") {
  TempDir dir("nmt_test_corpus");
  const auto s = dir.write("s.txt", "a b\nc\nd e f\n");
  const auto t = dir.write("t.txt", "x\ny z\nw\n");
  const ParallelText text = load_parallel(s, t, 50);
  CHECK(text.size() == 3);
  CHECK(text.dropped == 0);
  const ParallelText short_only = load_parallel(s, t, 2);
  CHECK(short_only.size() == 2);
  CHECK(short_only.dropped == 1);

  const auto t2 = dir.write("t2.txt", "x\ny\n");
  try {
    load_parallel(s, t2, 50);
    FAIL("expected AlignmentError");
  } catch (const AlignmentError& e) {
    const std::string msg = e.what();
    CHECK(msg.find('3') != std::string::npos);
    CHECK(msg.find('2') != std::string::npos);
  }
  const auto blank = dir.write("blank.txt", "a\n\nb\n");
  CHECK(load_parallel(blank, t, 50).dropped == 1);
}

TEST_CASE("batch layout") {
  auto corpus = testing::make_corpus({{4, 5}, {6}}, {{7}, {8, 9, 10}}, 12);
  const std::vector<std::size_t> idx{0, 1};
  const Batch b = make_batch(corpus, idx);
  CHECK(b.source_len == 3);
  CHECK(b.target_len == 5);
  CHECK(b.source == std::vector<int>{4, 5, kEos, 6, kEos, kPad});
  CHECK(b.target == std::vector<int>{kBos, 7, kEos, kPad, kPad, kBos, 8, 9, 10, kEos});
  for (std::size_t i = 0; i < b.source.size(); ++i) CHECK((b.source_mask[i] != 0) == (b.source[i] != kPad));
  for (std::size_t i = 0; i < b.target.size(); ++i) CHECK((b.target_mask[i] != 0) == (b.target[i] != kPad));
  CHECK(b.source_lengths == std::vector<std::size_t>{3, 2});
  CHECK(b.target_lengths == std::vector<std::size_t>{3, 5});
}

TEST_CASE("make_batches sizes, determinism and coverage") {
  std::mt19937_64 rng(1);
  auto seqs = testing::random_sequences(5, 1, 6, 12, rng);
  auto corpus = testing::make_corpus(seqs, seqs, 12);
  const auto batches = make_batches(corpus, 2, 9);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size == 2);
  CHECK(batches[1].size == 2);
  CHECK(batches[2].size == 1);
  CHECK_THROWS_AS(make_batches(corpus, 0, 1), ConfigError);

  auto many = testing::random_sequences(97, 1, 9, 12, rng);
  auto big = testing::make_corpus(many, many, 12);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto a = make_batches(big, 8, seed);
    const auto again = make_batches(big, 8, seed);
    REQUIRE(a.size() == again.size());
    std::vector<std::size_t> seen;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].indices == again[i].indices);
      seen.insert(seen.end(), a[i].indices.begin(), a[i].indices.end());
    }
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < seen.size(); ++i) CHECK(seen[i] == i);
    CHECK(seen.size() == 97);
  }
}

TEST_CASE("length sorting does not increase padding") {
  std::mt19937_64 rng(2);
  auto src = testing::random_sequences(1000, 1, 40, 30, rng);
  auto tgt = testing::random_sequences(1000, 1, 40, 30, rng);
  auto corpus = testing::make_corpus(src, tgt, 30);
  const double sorted = padding_fraction(make_batches(corpus, 32, 5, true));
  const double unsorted = padding_fraction(make_batches(corpus, 32, 5, false));
  CHECK(sorted <= unsorted);
}

TEST_CASE("synthetic tasks") {
  CHECK(synth_transform(SynthKind::kCopy, {0, 1, 2}, 10) == std::vector<int>{0, 1, 2});
  CHECK(synth_transform(SynthKind::kReverse, {0, 1, 2}, 10) == std::vector<int>{2, 1, 0});
  CHECK(synth_transform(SynthKind::kIncrement, {5, 6}, 10) == std::vector<int>{6, 7});
  CHECK(synth_transform(SynthKind::kIncrement, {9}, 10) == std::vector<int>{0});

  const auto a = synth_task(SynthKind::kReverse, 20, {5, 10}, 50, 3);
  const auto b = synth_task(SynthKind::kReverse, 20, {5, 10}, 50, 3);
  CHECK(a.source == b.source);
  CHECK(a.target == b.target);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.source[i].size() >= 5);
    CHECK(a.source[i].size() <= 10);
    TokenIds reversed(a.source[i].rbegin(), a.source[i].rend());
    CHECK(a.target[i] == reversed);
  }
  CHECK(a.source_vocab->size() == 24);
  CHECK(a.source_vocab->token(4) == "0");
  CHECK_THROWS_AS(synth_task(SynthKind::kCopy, 3, {1, 2}, 5, 1), ConfigError);
  CHECK_THROWS_AS(synth_task(SynthKind::kCopy, 10, {1, 2}, 0, 1), ConfigError);
  CHECK_THROWS_AS(parse_synth_kind("rot13"), ConfigError);
}

TEST_CASE("encode and decode round trip") {
  const Vocabulary v = build_vocab({{"the", "cat", "sat"}, {"the", "dog"}});
  const std::vector<std::string> sentence{"the", "dog", "sat"};
  CHECK(v.decode(v.encode(sentence)) == sentence);
  CHECK(ids_to_line(v, v.encode(sentence)) == "the dog sat");
  TokenIds with_eos = v.encode(sentence);
  with_eos.push_back(kEos);
  with_eos.push_back(v.id("cat"));
  CHECK(ids_to_line(v, with_eos) == "the dog sat");
}

TEST_CASE("validation and test split") {
  const auto held = synth_task(SynthKind::kCopy, 10, {2, 4}, 11, 1);
  const auto [val, test] = split_validation_test(held);
  CHECK(val.size() == 5);
  CHECK(test.size() == 6);
  CHECK(val.source.front() == held.source.front());
  CHECK(test.source.back() == held.source.back());
}
