#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "nmt/attention.hpp"
#include "nmt/error.hpp"
#include "support.hpp"

using namespace nmt;
using nmt::testing::max_abs_diff;
using nmt::testing::random_tensor;

namespace {

double score_loop(const Tensor& t, const Tensor& h, const AttentionParams& p) {
  const std::size_t A = p.v_a.numel();
  double s = 0;
  for (std::size_t a = 0; a < A; ++a) {
    double pre = 0;
    for (std::size_t k = 0; k < t.numel(); ++k) pre += p.W_a.at(a, k) * t[k];
    for (std::size_t k = 0; k < h.numel(); ++k) pre += p.U_a.at(a, k) * h[k];
    s += p.v_a[a] * std::tanh(pre);
  }
  return s;
}

Tensor row_of(const Tensor& m, std::size_t b) {
  const std::size_t w = m.dim(m.rank() - 1);
  return Tensor::from({w}, std::vector<Real>(m.data().begin() + static_cast<std::ptrdiff_t>(b * w),
                                             m.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * w)));
}

}  // namespace

TEST_CASE("align_score") {
  std::mt19937_64 rng(1);
  AttentionParams p = AttentionParams::init(4, 6, 5, rng);
  const Tensor t = random_tensor({4}, rng, 1.0, false);
  const Tensor h = random_tensor({6}, rng, 1.0, false);
  CHECK(std::abs(align_score(t, h, p).item() - score_loop(t, h, p)) < 1e-14);

  const AttentionParams zero = AttentionParams::zeros(4, 6, 5);
  CHECK(align_score(t, h, zero).item() == 0.0);
  CHECK(align_score(Tensor::zeros({4}), Tensor::zeros({6}), p).item() == 0.0);
  AttentionParams no_v = p;
  no_v.v_a = Tensor::zeros({5});
  CHECK(align_score(t, h, no_v).item() == 0.0);
  CHECK_THROWS_AS(align_score(Tensor::zeros({3}), h, p), DimensionError);
  CHECK_THROWS_AS(align_score(t, Tensor::zeros({4}), p), DimensionError);
  CHECK(AttentionParams::count(4, 6, 5) == 20 + 30 + 5);
}

TEST_CASE("attention_weights") {
  CHECK(attention_weights(Tensor::from({1}, {3.7}))[0] == doctest::Approx(1.0).epsilon(1e-15));
  const Tensor u = attention_weights(Tensor::from({5}, {2, 2, 2, 2, 2}));
  for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(u[i] - 0.2) < 1e-15);
  const Tensor w = attention_weights(Tensor::from({2}, {1, 0}));
  const double e = std::exp(1.0);
  CHECK(std::abs(w[0] - e / (e + 1)) < 1e-15);
  CHECK(std::abs(w[0] - 0.7311) < 1e-4);
  CHECK(std::abs(w[1] - 0.2689) < 1e-4);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor s = random_tensor({7}, rng, 20.0, false);
    const Tensor a = attention_weights(s);
    const double total = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    CHECK(std::abs(total - 1.0) <= 1e-6);
    for (Real v : a.data()) CHECK((v >= 0.0 && v <= 1.0));
    const Tensor shifted = attention_weights(add_scalar(s, 13.25));
    CHECK(max_abs_diff(a.data(), shifted.data()) < 1e-12);
  }
}

TEST_CASE("context_vector") {
  std::mt19937_64 rng(3);
  const Tensor states = random_tensor({4, 3}, rng, 1.0, false);
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<Real> one(4, 0.0);
    one[k] = 1.0;
    const Tensor c = context_vector(Tensor::from({4}, one), states);
    for (std::size_t j = 0; j < 3; ++j) CHECK(c[j] == states.at(k, j));
  }
  const Tensor same = Tensor::from({3, 2}, {0.3, -0.7, 0.3, -0.7, 0.3, -0.7});
  const Tensor c = context_vector(Tensor::from({3}, {1.0 / 3, 1.0 / 3, 1.0 / 3}), same);
  CHECK(std::abs(c[0] - 0.3) < 1e-15);
  CHECK(std::abs(c[1] + 0.7) < 1e-15);

  const Tensor w = attention_weights(random_tensor({4}, rng, 1.0, false));
  const Tensor got = context_vector(w, states);
  for (std::size_t j = 0; j < 3; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < 4; ++i) s += w[i] * states.at(i, j);
    CHECK(std::abs(got[j] - s) < 1e-14);
  }
  CHECK_THROWS_AS(context_vector(Tensor::zeros({3}), states), DimensionError);
}

TEST_CASE("attended_step") {
  std::mt19937_64 rng(4);
  const Tensor emb = random_tensor({2, 3}, rng, 1.0, false);
  const Tensor ctx = random_tensor({2, 4}, rng, 1.0, false);
  const Tensor s = random_tensor({2, 5}, rng, 1.0, false);
  const CellState z = attended_step(emb, {s, {}}, ctx, CellParams::zeros(CellKind::kGru, 7, 5));
  for (std::size_t i = 0; i < 10; ++i) CHECK(std::abs(z.h[i] - 0.5 * s[i]) <= 1e-12);

  // a zero context contributes nothing, so only the embedding columns of W_* matter
  const CellParams full = CellParams::init(CellKind::kGru, 7, 5, rng);
  CellParams narrow = CellParams::zeros(CellKind::kGru, 3, 5);
  for (const auto& [name, t] : full.tensors) {
    if (name[0] != 'W') {
      narrow[name] = t;
      continue;
    }
    std::vector<Real> cols;
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t k = 0; k < 3; ++k) cols.push_back(t.at(r, k));
    }
    narrow[name] = Tensor::from({5, 3}, cols, true);
  }
  const CellState a = attended_step(emb, {s, {}}, Tensor::zeros({2, 4}), full);
  const CellState b = gru_step(emb, {s, {}}, narrow);
  CHECK(max_abs_diff(a.h.data(), b.h.data()) < 1e-14);

  CHECK_THROWS_AS(attended_step(emb, {s, {}}, Tensor::zeros({3, 4}), full), DimensionError);
  CHECK_THROWS_AS(attended_step(emb, {s, s}, ctx, CellParams::zeros(CellKind::kLstm, 7, 5)), ContractError);
}

TEST_CASE("batched attention agrees with the per-pair path") {
  std::mt19937_64 rng(5);
  const AttentionParams p = AttentionParams::init(4, 6, 5, rng);
  const Tensor enc = random_tensor({3, 5, 6}, rng, 1.0, false);
  std::vector<std::uint8_t> mask(15, 1);
  mask[9] = 0;  // row 1, last position
  const AdditiveAttention attn(p, enc, mask);
  const Tensor dec = random_tensor({3, 4}, rng, 1.0, false);
  const auto [weights, context] = attn.attend(dec);
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t visible = b == 1 ? 4 : 5;
    std::vector<Real> scores;
    std::vector<Real> rows;
    for (std::size_t i = 0; i < visible; ++i) {
      const Tensor h = row_of(reshape(enc, {15, 6}), b * 5 + i);
      scores.push_back(align_score(row_of(dec, b), h, p).item());
      rows.insert(rows.end(), h.data().begin(), h.data().end());
    }
    const Tensor w = attention_weights(Tensor::from({visible}, scores));
    const Tensor c = context_vector(w, Tensor::from({visible, 6}, rows));
    for (std::size_t i = 0; i < 5; ++i) {
      const double expect = i < visible ? w[i] : 0.0;
      CHECK(std::abs(weights.at(b, i) - expect) < 1e-13);
    }
    for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(context.at(b, j) - c[j]) < 1e-13);
  }
  CHECK_THROWS_AS(AdditiveAttention(p, enc, std::vector<std::uint8_t>(15, 0)), ContractError);
  CHECK_THROWS_AS(attn.attend(Tensor::zeros({2, 4})), DimensionError);
}

TEST_CASE("rows are stochastic for random instances") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const AttentionParams p = AttentionParams::init(4, 6, 5, rng);
    const AdditiveAttention attn(p, random_tensor({2, 7, 6}, rng, 3.0, false), {});
    const Tensor w = attn.attend(random_tensor({2, 4}, rng, 3.0, false)).first;
    AttentionMatrix m;
    for (std::size_t b = 0; b < 2; ++b) {
      const Tensor r = row_of(w, b);
      m.weights.emplace_back(r.data().begin(), r.data().end());
    }
    CHECK(is_row_stochastic(m));
  }
  AttentionMatrix bad;
  bad.weights = {{0.5, 0.6}};
  CHECK_FALSE(is_row_stochastic(bad));
}

TEST_CASE("permuting encoder states permutes the weights") {
  std::mt19937_64 rng(7);
  const AttentionParams p = AttentionParams::init(3, 4, 6, rng);
  const Tensor enc = random_tensor({1, 5, 4}, rng, 1.0, false);
  const Tensor dec = random_tensor({1, 3}, rng, 1.0, false);
  const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  std::vector<Real> permuted;
  for (std::size_t i : perm) {
    for (std::size_t k = 0; k < 4; ++k) permuted.push_back(enc[i * 4 + k]);
  }
  const auto [w, c] = AdditiveAttention(p, enc, {}).attend(dec);
  const auto [pw, pc] = AdditiveAttention(p, Tensor::from({1, 5, 4}, permuted), {}).attend(dec);
  for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(pw[j] - w[perm[j]]) < 1e-14);
  CHECK(max_abs_diff(c.data(), pc.data()) < 1e-14);
}

TEST_CASE("gradients through attention and the attended step") {
  std::mt19937_64 rng(8);
  AttentionParams p = AttentionParams::init(5, 6, 4, rng);
  const CellParams cell = CellParams::init(CellKind::kGru, 3 + 6, 5, rng);
  const Tensor enc = random_tensor({2, 4, 6}, rng);
  const Tensor s0 = random_tensor({2, 5}, rng);
  const Tensor emb = random_tensor({2, 3}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 1, 0, 0};
  auto loss = [&] {
    const AdditiveAttention attn(p, enc, mask);
    CellState s{s0, {}};
    Tensor total;
    for (int step = 0; step < 3; ++step) {
      const auto [w, ctx] = attn.attend(s.h);
      s = attended_step(emb, s, ctx, cell);
      const Tensor l = add(testing::probe_loss(s.h, 10 + static_cast<std::uint64_t>(step)), testing::probe_loss(w, 20));
      total = total.defined() ? add(total, l) : l;
    }
    return total;
  };
  std::vector<NamedTensor> params{{"W_a", p.W_a}, {"U_a", p.U_a}, {"v_a", p.v_a}, {"enc", enc}, {"s0", s0}, {"emb", emb}};
  for (const auto& [name, t] : cell.tensors) params.push_back({name, t});
  const auto r = testing::check_gradients(params, loss, rng);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}
