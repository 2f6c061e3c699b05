#include <cmath>
#include <map>

#include "csd/analytics.hpp"
#include "csd/cascade.hpp"
#include "csd/statlm.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace csd;

namespace {

struct Family {
  ModelPtr target;
  std::vector<ModelPtr> drafts;
};

Family random_family(RandomSource& rng, std::size_t v, std::size_t n_drafts) {
  Family f;
  f.target = testing::random_markov("target", v, rng, 1.0);
  for (std::size_t i = 0; i < n_drafts; ++i)
    f.drafts.push_back(testing::random_markov("draft" + std::to_string(i), v, rng, 0.1 / static_cast<double>(i + 1)));
  return f;
}

TokenSeq greedy_reference(const LanguageModel& target, const TokenSeq& prompt, std::size_t n) {
  RandomSource rng(0);
  return autoregressive_generate(target, prompt, n, DecodeMode::Greedy, rng).tokens;
}

}  // namespace

TEST_SUITE("cascade") {
  TEST_CASE("k-matrix shape checks") {
    CHECK_NOTHROW(KMatrix({{2, 10}, {0, 10}}));
    CHECK_THROWS_AS(KMatrix({{2, 10}, {1, 10}}), ContractViolation);
    CHECK_THROWS_AS(KMatrix({{2, 10}}), ContractViolation);
    const KMatrix k({{1, 2, 3}, {0, 4, 5}, {0, 0, 6}});
    CHECK(k.sub(1).rows() == std::vector<std::vector<std::size_t>>{{4, 5}, {0, 6}});
    CHECK(k.sub(3).size() == 0);
  }

  TEST_CASE("config validation") {
    RandomSource rng(1);
    auto f = random_family(rng, 4, 2);
    CascadeConfig c;
    c.target = f.target;
    c.drafts = f.drafts;
    c.k_matrix = KMatrix({{2, 3}, {0, 2}});
    CHECK_NOTHROW(c.validate());
    c.k_matrix = KMatrix::single(3);
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.k_matrix = KMatrix({{2, 3}, {0, 2}});
    c.mode = DecodeMode::Sampling;
    c.lenience = Lenience(3);
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.allow_inexact_sampling = true;
    CHECK_NOTHROW(c.validate());
    c.drafts.push_back(testing::random_markov("wide", 5, rng));
    c.k_matrix = KMatrix({{1, 1, 1}, {0, 1, 1}, {0, 0, 1}});
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("empty budget returns the prompt") {
    RandomSource rng(2);
    auto f = random_family(rng, 4, 1);
    CascadeConfig c{f.target, f.drafts, KMatrix::single(3)};
    c.max_new_tokens = 0;
    const auto r = generate(c, TokenSeq{1, 2});
    CHECK(r.tokens == TokenSeq{1, 2});
    CHECK(r.trace.calls_per_model.empty());
    CHECK(r.trace.tokens_emitted == 0);
  }

  TEST_CASE("greedy cascades reproduce target greedy output") {
    RandomSource rng(3);
    const std::vector<KMatrix> one{KMatrix::single(1), KMatrix::single(4)};
    const std::vector<KMatrix> two{KMatrix({{2, 10}, {0, 10}}), KMatrix({{3, 1}, {0, 2}}), KMatrix({{0, 5}, {0, 2}})};
    const std::vector<KMatrix> three{KMatrix({{2, 2, 4}, {0, 3, 2}, {0, 0, 5}}), KMatrix({{1, 0, 3}, {0, 2, 0}, {0, 0, 1}})};
    for (int trial = 0; trial < 12; ++trial) {
      auto f = random_family(rng, 5, 3);
      const TokenSeq prompt{static_cast<TokenId>(trial % 5), 1};
      const TokenSeq want = greedy_reference(*f.target, prompt, 40);
      for (double l : {1.0, 3.0, 5.0}) {
        auto run = [&](const std::vector<KMatrix>& ks, std::size_t n) {
          for (const auto& k : ks) {
            CascadeConfig c;
            c.target = f.target;
            c.drafts.assign(f.drafts.begin(), f.drafts.begin() + static_cast<std::ptrdiff_t>(n));
            c.k_matrix = k;
            c.lenience = Lenience(l);
            c.max_new_tokens = 40;
            c.seed = static_cast<std::uint64_t>(trial);
            const auto r = generate(c, prompt);
            CHECK(r.tokens == want);
            CHECK(r.trace.tokens_emitted == 40);
          }
        };
        run(one, 1);
        run(two, 2);
        run(three, 3);
      }
    }
  }

  TEST_CASE("call accounting") {
    RandomSource rng(4);
    auto f = random_family(rng, 5, 2);
    CascadeConfig c{f.target, f.drafts, KMatrix({{3, 4}, {0, 2}}), Lenience(2)};
    c.max_new_tokens = 50;
    const auto r = generate(c, TokenSeq{0});
    double cost = 0.0;
    for (const auto& [m, n] : r.trace.calls_per_model) cost += static_cast<double>(n) * r.trace.cost_weights.at(m);
    CHECK(r.trace.cost_units == doctest::Approx(cost).epsilon(1e-12));
    std::size_t outer = 0;
    for (const auto& s : r.trace.steps) {
      outer += s.level == 0 ? 1 : 0;
      CHECK(s.accepted <= s.proposed);
      CHECK(s.positional_accept.size() == s.proposed);
    }
    CHECK(r.trace.target_calls() == outer);
    CHECK(r.trace.tokens_emitted == r.tokens.size() - 1);
  }

  TEST_CASE("one draft with [[k]] matches sd_generate exactly") {
    RandomSource rng(5);
    for (auto mode : {DecodeMode::Greedy, DecodeMode::Sampling}) {
      for (std::size_t k : {1u, 3u, 6u}) {
        auto f = random_family(rng, 5, 1);
        CascadeConfig c{f.target, f.drafts, KMatrix::single(k)};
        c.mode = mode;
        c.max_new_tokens = 60;
        c.seed = 99 + k;
        const auto a = generate(c, TokenSeq{2});
        RandomSource sd_rng(c.seed);
        const auto b = sd_generate(*f.target, *f.drafts[0], k, Lenience{}, TokenSeq{2}, 60, mode, sd_rng);
        CHECK(a.tokens == b.tokens);
        CHECK(a.trace == b.trace);
      }
    }
  }

  TEST_CASE("zero drafts degenerate to autoregressive generation") {
    RandomSource rng(6);
    auto f = random_family(rng, 6, 0);
    for (auto mode : {DecodeMode::Greedy, DecodeMode::Sampling}) {
      CascadeConfig c{f.target, {}, KMatrix{}};
      c.mode = mode;
      c.max_new_tokens = 30;
      c.seed = 7;
      const auto a = generate(c, TokenSeq{1});
      RandomSource ar_rng(7);
      const auto b = autoregressive_generate(*f.target, TokenSeq{1}, 30, mode, ar_rng);
      CHECK(a.tokens == b.tokens);
      CHECK(b.trace.target_calls() == b.trace.tokens_emitted);
      CHECK(a.trace.target_calls() == 30);
    }
  }

  TEST_CASE("self-agreeing drafts collapse the cascade") {
    RandomSource rng(7);
    auto t = testing::random_markov("t", 5, rng);
    auto d1 = std::make_shared<AliasModel>(t, "d1", 0.1);
    auto d2 = std::make_shared<AliasModel>(t, "d2", 0.01);
    CascadeConfig c{t, {d1, d2}, KMatrix({{2, 3}, {0, 2}})};
    c.max_new_tokens = 60;
    const auto r = generate(c, TokenSeq{0});
    for (const auto& s : r.trace.steps) CHECK(s.accepted == s.proposed);
    std::size_t outer_reviews = 0;
    for (const auto& s : r.trace.steps) outer_reviews += s.level == 0;
    CHECK(r.trace.target_calls() == outer_reviews);
  }

  TEST_CASE("stop tokens end generation inclusively") {
    auto t = std::make_shared<MarkovModel>("t", Distribution({0, 1, 0}),
                                           std::vector<Distribution>{Distribution({0, 1, 0}), Distribution({0, 0, 1}),
                                                                     Distribution({1, 0, 0})},
                                           1.0);
    CascadeConfig c{t, {t}, KMatrix::single(5)};
    c.max_new_tokens = 20;
    c.stop_tokens = {2};
    const auto r = generate(c, TokenSeq{0});
    CHECK(r.tokens == TokenSeq{0, 1, 2});
    CHECK(r.trace.tokens_emitted == 2);
  }

  TEST_CASE("mag base case emits its span with probability one") {
    const Vocab v = Vocab::build(TokenizerKind::Byte, "abcdefghijklmnop");
    const TokenSeq text = v.tokenize("abcdefghijklmnop");
    auto bigram = std::make_shared<BigramTable>(train_bigram("bi", v, text));
    auto mag = std::make_shared<MagModel>("mag", bigram, 10, MatchPolicy::PromptOnly);
    const TokenSeq prompt = v.tokenize("abcdefghijklmnop");
    auto bound = mag->bind_prompt(prompt);
    GenerationTrace trace;
    RandomSource rng(0);
    const TokenSeq gen = v.tokenize("xa");
    const auto block = csd_step(*bound, {}, gen, KMatrix{}, Lenience{}, false, DecodeMode::Sampling, rng, trace);
    CHECK(block.tokens == v.tokenize("bcdefghijk"));
    CHECK(block.probs == std::vector<double>(10, 1.0));
    CHECK(trace.calls("mag") == 1);
  }

  TEST_CASE("sampling cascades match target 3-token marginals") {
    RandomSource rng(8);
    const std::size_t v = 5;
    auto target = testing::peaked_markov("t", v, rng, 0.8);
    auto d1 = testing::peaked_markov("d1", v, rng, 0.7, 0.1);
    auto d2 = testing::peaked_markov("d2", v, rng, 0.6, 0.01);
    // Exact target distribution over 3-token continuations of {0}.
    std::map<std::vector<TokenId>, double> exact;
    for (TokenId a = 0; a < 5; ++a)
      for (TokenId b = 0; b < 5; ++b)
        for (TokenId c = 0; c < 5; ++c)
          exact[{a, b, c}] = target->row_after(0)[a] * target->row_after(a)[b] * target->row_after(b)[c];
    CascadeConfig c{target, {d1, d2}, KMatrix({{2, 2}, {0, 2}})};
    c.mode = DecodeMode::Sampling;
    c.max_new_tokens = 3;
    std::map<std::vector<TokenId>, double> empirical;
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
      c.seed = RandomSource::split(1234, static_cast<std::uint64_t>(i));
      const auto r = generate(c, TokenSeq{0});
      empirical[{r.tokens[1], r.tokens[2], r.tokens[3]}] += 1.0 / n;
    }
    CHECK(testing::total_variation(exact, empirical) <= 0.02);
  }

  TEST_CASE("live sd on a synthetic pair matches the closed form") {
    const Distribution base({0.4, 0.3, 0.2, 0.1});
    const auto pair = synthetic_pair(base, 0.7);
    RandomSource rng(9);
    const std::size_t steps = 20000, k = 4;
    double tokens = 0.0;
    for (std::size_t s = 0; s < steps; ++s)
      tokens += static_cast<double>(sd_step(*pair.target, *pair.draft, k, Lenience{}, TokenSeq{0},
                                            DecodeMode::Sampling, rng).emitted.size());
    const double expected = (1.0 - std::pow(0.7, 5)) / 0.3;
    CHECK(std::abs(tokens / steps / expected - 1.0) <= 0.02);
  }
}
