#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "slm/error.hpp"
#include "slm/model.hpp"
#include "support.hpp"

using namespace slm;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 4;
  c.n_layers = 2;
  c.d_ff = 32;
  c.source_vocab = 12;
  c.target_vocab = 10;
  c.max_steps = 12;
  c.dropout = 0.1;
  return c;
}

std::vector<DirectedToken> prefix_of(std::initializer_list<TokenId> ids) {
  std::vector<DirectedToken> out;
  for (TokenId id : ids) out.push_back({id, Direction::Right});
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = small_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.max_steps = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("encoder shapes and determinism") {
  SpiralModel<float> m(small_config(), 1);
  CHECK(m.direction_embedding().rows() == 2);
  const std::vector<TokenId> one = {5};
  CHECK(m.encode(one).states.shape() == std::array<std::size_t, 2>{1, 16});
  const std::vector<TokenId> src = {3, 4, 5, 6};
  const auto a = m.encode(src).states;
  const auto b = m.encode(src).states;
  CHECK(std::ranges::equal(a.value(), b.value()));
  const std::vector<TokenId> perm = {4, 3, 5, 6};
  CHECK_FALSE(std::ranges::equal(a.value(), m.encode(perm).states.value()));
  CHECK_THROWS_AS(m.encode(std::vector<TokenId>{}), DataError);
  CHECK_THROWS_AS(m.encode(std::vector<TokenId>{3, 40}), DataError);
  CHECK_THROWS_AS(m.encode(std::vector<TokenId>(13, 3)), DataError);
}

TEST_CASE("tuple embedding is a sum of rows") {
  SpiralModel<double> m(small_config(), 2);
  const std::size_t d = 16;
  for (TokenId t = 0; t < 10; ++t) {
    for (int s = 0; s < 12; ++s) {
      const auto plus = m.embed_tuple(t, Direction::Right, s);
      const auto minus = m.embed_tuple(t, Direction::Left, s);
      for (std::size_t c = 0; c < d; ++c) {
        const double want = m.direction_embedding().at(1, c) - m.direction_embedding().at(0, c);
        CHECK(plus[c] - minus[c] == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
  const auto x = m.embed_tuple(4, Direction::Left, 3);
  const auto y = m.embed_tuple(7, Direction::Left, 3);
  for (std::size_t c = 0; c < d; ++c) {
    const double want = m.target_embedding().at(4, c) - m.target_embedding().at(7, c);
    CHECK(x[c] - y[c] == doctest::Approx(want).epsilon(1e-12));
  }
  for (auto* table : {&m.target_embedding(), &m.direction_embedding(), &m.position_embedding()}) {
    for (auto& v : table->mutable_value()) v = 0.0;
  }
  for (double v : m.embed_tuple(5, Direction::Right, 2)) CHECK(v == 0.0);
  CHECK_THROWS_AS(m.embed_tuple(10, Direction::Right, 0), DataError);
  CHECK_THROWS_AS(m.embed_tuple(3, Direction::Right, 12), DataError);
}

TEST_CASE("decoder is causal over steps") {
  const SpiralModel<float> m(small_config(), 3);
  const auto mem = m.encode(std::vector<TokenId>{3, 4, 5});
  const auto prefix = prefix_of({1, 4, 5, 6, 7});
  const auto base = m.decode_forward(prefix, mem);
  CHECK(base.shape() == std::array<std::size_t, 2>{5, 10});
  for (std::size_t t = 0; t + 1 < prefix.size(); ++t) {
    auto changed = prefix;
    changed[t + 1].token = 9;
    changed[t + 1].direction = Direction::Left;
    const auto other = m.decode_forward(changed, mem);
    for (std::size_t r = 0; r <= t; ++r) {
      for (std::size_t c = 0; c < 10; ++c) CHECK(base.at(r, c) == other.at(r, c));
    }
  }
  CHECK(m.decode_forward(prefix_of({4}), mem).shape() == std::array<std::size_t, 2>{1, 10});
  CHECK_THROWS_AS(m.decode_forward(prefix_of({1, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3}), mem),
                  DataError);
  CHECK_THROWS_AS(m.decode_forward(prefix_of({}), mem), DataError);
}

TEST_CASE("last direction changes last logits") {
  int differ = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SpiralModel<float> m(small_config(), seed);
    const auto mem = m.encode(std::vector<TokenId>{3, 4});
    auto prefix = prefix_of({5, 6});
    const auto right = m.decode_forward(prefix, mem);
    prefix.back().direction = Direction::Left;
    const auto left = m.decode_forward(prefix, mem);
    bool any = false;
    for (std::size_t c = 0; c < 10; ++c) any |= right.at(1, c) != left.at(1, c);
    differ += any;
  }
  CHECK(differ >= 99);
}

TEST_CASE("batched decode matches single decode") {
  const SpiralModel<double> m(small_config(), 4);
  const std::vector<TokenId> s1 = {3, 4, 5};
  const std::vector<TokenId> s2 = {6, 7};
  const auto mem = m.encode_batch({s1, s2}, {});
  const std::vector<std::vector<DirectedToken>> prefixes = {prefix_of({4, 5}), prefix_of({1, 6, 7})};
  const std::vector<std::size_t> index = {1, 0};
  const auto packed = m.decode_batch(mem, index, prefixes, {});
  const auto a = m.decode_forward(prefixes[0], m.encode(s2));
  const auto b = m.decode_forward(prefixes[1], m.encode(s1));
  for (std::size_t c = 0; c < 10; ++c) {
    CHECK(packed.at(1, c) == doctest::Approx(a.at(1, c)).epsilon(1e-12));
    CHECK(packed.at(4, c) == doctest::Approx(b.at(2, c)).epsilon(1e-12));
  }
}

TEST_CASE("start head") {
  SpiralModel<double> m(small_config(), 5);
  const auto mem = m.encode(std::vector<TokenId>{3, 4, 5, 6});
  const auto v = m.start_potentials(mem.states);
  CHECK(v.shape() == std::array<std::size_t, 2>{4, 10});
  const auto pred = m.start_probs(v);
  for (std::size_t k = 0; k < 10; ++k) {
    double total = 0;
    for (std::size_t t = 0; t < 4; ++t) total += pred.alpha[t * 10 + k];
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(pred.probabilities[k] > 0.0);
    CHECK(pred.probabilities[k] < 1.0);
  }

  const auto constant = ad::Tensor<double>::constant(3, 10, std::vector<double>(30, 0.7));
  const auto flat = m.start_probs(constant);
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(flat.pooled[k] == doctest::Approx(0.7));
    CHECK(flat.probabilities[k] == doctest::Approx(1.0 / (1.0 + std::exp(-0.7))));
    for (std::size_t t = 0; t < 3; ++t) CHECK(flat.alpha[t * 10 + k] == doctest::Approx(1.0 / 3));
  }
  const auto single = m.start_probs(ad::slice(v, 0, 0, 1));
  for (std::size_t k = 0; k < 10; ++k) CHECK(single.pooled[k] == doctest::Approx(v.at(0, k)));

  for (auto* p : {&m.start_w1(), &m.start_b1(), &m.start_w2()}) {
    for (auto& x : p->mutable_value()) x = 0.0;
  }
  const auto zeros = m.start_potentials(mem.states);
  for (double x : zeros.value()) CHECK(x == 0.0);
}

TEST_CASE("start potentials gradient") {
  SpiralModel<double> m(small_config(), 6);
  const auto mem = m.encode(std::vector<TokenId>{3, 4, 5});
  struct Head {
    SpiralModel<double>& m;
    std::vector<ad::Tensor<double>> params;
    std::vector<std::string> names = {"w1", "b1", "w2"};
    std::span<ad::Tensor<double>> parameters() { return params; }
    std::span<const std::string> parameter_names() const { return names; }
  } head{m, {m.start_w1(), m.start_b1(), m.start_w2()}};
  const auto states = ad::Tensor<double>::constant(3, 16, {mem.states.value().begin(),
                                                          mem.states.value().end()});
  const auto r = testing::finite_difference_check(
      head, [&] { return ad::sum(ad::sigmoid(m.start_potentials(states))); }, 40, 1e-5);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("bundle save and load") {
  ModelConfig c = small_config();
  const std::vector<std::string> src = {"a", "b", "c", "d", "e", "f", "g", "h", "i"};
  const std::vector<std::string> tgt = {"x", "y", "z", "the", "u", "v", "w"};
  c.source_vocab = static_cast<int>(src.size()) + 3;
  c.target_vocab = static_cast<int>(tgt.size()) + 3;
  ModelBundle bundle{SpiralModel<float>(c, 9), Vocab::from_tokens(src), Vocab::from_tokens(tgt),
                     {"the"}, "slm-twostage"};
  const auto path = std::filesystem::temp_directory_path() / "slm_bundle_test.slmc";
  save_bundle(path, bundle);
  const ModelBundle back = load_bundle(path);
  CHECK(back.strategy == "slm-twostage");
  CHECK(back.stop_words.contains("the"));
  CHECK(back.target_vocab.id("the") == bundle.target_vocab.id("the"));
  CHECK(back.model.config().d_model == 16);
  CHECK(back.model.config().dropout == doctest::Approx(0.1));
  const auto names = bundle.model.parameter_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    CHECK(std::ranges::equal(bundle.model.parameters()[i].value(),
                             back.model.parameters()[i].value()));
  }
  CHECK(encode_checkpoint(to_checkpoint(back)) == encode_checkpoint(to_checkpoint(bundle)));
  std::filesystem::remove(path);
}
