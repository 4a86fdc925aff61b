#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "nmt/model.hpp"
#include "nmt/tensor.hpp"

namespace nmt::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, Real bound = 1.0, bool grad = true) {
  return Tensor::uniform(shape, bound, rng, grad);
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "<name>[index]"
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
/// turning rounding noise into huge ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares tape gradients with central differences (step h) for every
/// tensor in `params`. At most `per_tensor` coordinates are probed per tensor
/// (all of them when 0), chosen with `rng`.
inline GradCheck check_gradients(const std::vector<NamedTensor>& params, const std::function<Tensor()>& loss_fn,
                                 std::mt19937_64& rng, std::size_t per_tensor = 0, double h = 1e-5) {
  for (const auto& p : params) Tensor(p.tensor).zero_grad();
  {
    const Tensor loss = loss_fn();
    backward(loss);
  }
  GradCheck out;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    const std::vector<Real> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> coords(t.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (per_tensor && coords.size() > per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(per_tensor);
    }
    for (std::size_t i : coords) {
      const Real saved = t.mutable_data()[i];
      double plus = 0, minus = 0;
      {
        NoGradGuard guard;
        t.mutable_data()[i] = saved + h;
        plus = loss_fn().item();
        t.mutable_data()[i] = saved - h;
        minus = loss_fn().item();
      }
      t.mutable_data()[i] = saved;
      const double numeric = (plus - minus) / (2 * h);
      const double err = relative_error(analytic[i], numeric);
      ++out.checked;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

inline GradCheck check_gradients(const std::vector<Tensor>& params, const std::function<Tensor()>& loss_fn,
                                 std::mt19937_64& rng, std::size_t per_tensor = 0, double h = 1e-5) {
  std::vector<NamedTensor> named;
  for (std::size_t i = 0; i < params.size(); ++i) named.push_back({"arg" + std::to_string(i), params[i]});
  return check_gradients(named, loss_fn, rng, per_tensor, h);
}

/// Weighted sum with fixed random weights, so every output element matters to the loss.
inline Tensor probe_loss(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const Tensor w = Tensor::uniform(y.shape(), 1.0, rng, false);
  return sum(mul(y, w));
}

inline double max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Small model configuration with every architecture knob set explicitly.
inline ModelConfig toy_config(Architecture arch, std::size_t vocab = 20, std::size_t d = 16, std::size_t layers = 2) {
  ModelConfig c = ModelConfig::defaults(arch);
  c.d_model = d;
  c.encoder_layers = c.decoder_layers = layers;
  c.heads = 2;
  c.d_ff = 2 * d;
  c.source_vocab = c.target_vocab = vocab;
  c.max_decode_len = 8;
  return c;
}

/// Random id sequences in [4, vocab) of the given lengths.
inline std::vector<TokenIds> random_sequences(std::size_t count, std::size_t min_len, std::size_t max_len, int vocab,
                                              std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> tok(kNumSpecial, vocab - 1);
  std::vector<TokenIds> out(count);
  for (auto& s : out) {
    s.resize(len(rng));
    for (auto& t : s) t = tok(rng);
  }
  return out;
}

/// Corpus with a shared synthetic vocabulary of `vocab` ids.
inline ParallelCorpus make_corpus(std::vector<TokenIds> source, std::vector<TokenIds> target, int vocab) {
  auto v = std::make_shared<Vocabulary>();
  for (int i = kNumSpecial; i < vocab; ++i) v->add("w" + std::to_string(i), 1);
  ParallelCorpus c;
  c.source = std::move(source);
  c.target = std::move(target);
  c.source_vocab = v;
  c.target_vocab = v;
  return c;
}

}  // namespace nmt::testing
