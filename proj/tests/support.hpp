#pragma once

// Shared fixtures: a deterministic table scorer, an exhaustive decoding
// oracle and a finite-difference gradient checker.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "slm/inference.hpp"
#include "slm/ordering.hpp"
#include "slm/training.hpp"

namespace slm::testing {

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  h ^= h >> 31;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 29;
  return h;
}

inline double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

// Scores depend only on (seed, context, candidate token).
class TableScorer final : public SourceScorer {
 public:
  TableScorer(std::size_t vocab, std::uint64_t seed) : vocab_(vocab), seed_(seed) {}
  std::size_t vocab_size() const override { return vocab_; }
  std::vector<double> start_probabilities() const override {
    std::vector<double> p(vocab_);
    for (std::size_t i = 0; i < vocab_; ++i) p[i] = 0.05 + 0.9 * unit(mix(seed_, 1000 + i));
    return p;
  }
  std::vector<std::vector<double>> next_logits(
      const std::vector<std::vector<DirectedToken>>& contexts) const override {
    std::vector<std::vector<double>> out;
    for (const auto& ctx : contexts) {
      std::uint64_t h = mix(seed_, ctx.size());
      for (const auto& t : ctx) {
        h = mix(h, static_cast<std::uint64_t>(t.token) * 2 + (t.direction == Direction::Left));
      }
      std::vector<double> row(vocab_);
      for (std::size_t i = 0; i < vocab_; ++i) row[i] = 4.0 * (unit(mix(h, i)) - 0.5);
      out.push_back(std::move(row));
    }
    return out;
  }

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
};

struct OracleBest {
  std::vector<TokenId> tokens;
  std::vector<DirectedToken> trace;
  double score = -std::numeric_limits<double>::infinity();
};

// Best (sentence, ordering) pair over every sentence of 1..max_len regular
// tokens and every ordering that starts at a regular token.
inline OracleBest exhaustive_best(const SourceScorer& scorer, int max_len, double alpha) {
  const std::size_t v = scorer.vocab_size();
  const std::size_t real = v - kFirstRealId;
  const auto start = scorer.start_probabilities();
  OracleBest best;
  for (int len = 1; len <= max_len; ++len) {
    std::size_t combos = 1;
    for (int i = 0; i < len; ++i) combos *= real;
    const auto orderings = enumerate_orderings(len);
    for (std::size_t c = 0; c < combos; ++c) {
      std::vector<TokenId> seq;
      for (std::size_t r = c, i = 0; i < static_cast<std::size_t>(len); ++i, r /= real) {
        seq.push_back(static_cast<TokenId>(kFirstRealId + r % real));
      }
      for (const auto& z : orderings) {
        const ReformedSequence x = reform(seq, z);
        if (is_special(x[0].token)) continue;
        std::vector<std::vector<DirectedToken>> contexts;
        for (std::size_t t = 1; t < x.size(); ++t) {
          contexts.emplace_back(x.elements().begin(),
                                x.elements().begin() + static_cast<std::ptrdiff_t>(t));
        }
        const auto rows = scorer.next_logits(contexts);
        double sum = std::log(start[static_cast<std::size_t>(x[0].token)]);
        for (std::size_t t = 1; t < x.size(); ++t) {
          const Direction d = x[t - 1].direction;
          const auto& row = rows[t - 1];
          double z_sum = 0.0;
          for (std::size_t i = 0; i < v; ++i) {
            const bool ok = i >= kFirstRealId || (i == kEolId && d == Direction::Left) ||
                            (i == kEorId && d == Direction::Right);
            if (ok) z_sum += std::exp(row[i]);
          }
          sum += row[static_cast<std::size_t>(x[t].token)] - std::log(z_sum);
        }
        const double score = sum / std::pow((5.0 + len) / 6.0, alpha);
        if (score > best.score) {
          best.score = score;
          best.tokens = seq;
          best.trace.assign(x.elements().begin(), x.elements().end());
        }
      }
    }
  }
  return best;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Central differences on up to `per_tensor` entries of every parameter.
template <typename Model, typename LossFn>
GradCheck finite_difference_check(Model& model, const LossFn& loss_fn, std::size_t per_tensor,
                                  double h = 1e-5) {
  auto loss = loss_fn();
  ad::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& p : model.parameters()) {
    analytic.emplace_back(p.grad().begin(), p.grad().end());
    p.clear_grad();
  }
  GradCheck out;
  Rng rng(12345);
  auto params = model.parameters();
  const auto names = model.parameter_names();
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_value();
    const std::size_t n = values.size();
    for (std::size_t j = 0; j < std::min(per_tensor, n); ++j) {
      const std::size_t idx = per_tensor >= n ? j : uniform_below(rng, n);
      const double saved = values[idx];
      double plus = 0.0;
      double minus = 0.0;
      {
        ad::NoGradGuard ng;
        values[idx] = saved + h;
        plus = loss_fn().item();
        values[idx] = saved - h;
        minus = loss_fn().item();
      }
      values[idx] = saved;
      const double numeric = (plus - minus) / (2 * h);
      const double a = analytic[pi].empty() ? 0.0 : analytic[pi][idx];
      const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-7);
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = std::string(names[pi]) + "[" + std::to_string(idx) + "]";
      }
    }
  }
  return out;
}

// Tiny double model and batch exercising both loss heads.
struct GradFixture {
  SpiralModel<double> model;
  std::vector<TrainingInstance> batch;
};

inline GradFixture make_grad_fixture(std::uint64_t seed) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 12;
  c.source_vocab = 9;
  c.target_vocab = 9;
  c.max_steps = 8;
  c.dropout = 0.0;
  GradFixture f{SpiralModel<double>(c, seed), {}};
  Rng rng = derive_rng(seed, 7);
  const std::vector<bool> stops = {false, false, false, true};
  const std::vector<EncodedPair> pairs = {{{3, 4, 5}, {6, 3, 7, 8}}, {{5, 6}, {4, 4}}};
  for (const auto& p : pairs) {
    const auto z = sample_uniform_ordering(static_cast<int>(p.target.size()), rng);
    f.batch.push_back(make_training_instance(p, z, 9, stops));
  }
  return f;
}

}  // namespace slm::testing
