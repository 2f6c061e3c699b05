#include <cmath>

#include "csd/core.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace csd;

TEST_SUITE("core") {
  TEST_CASE("normalize examples") {
    const double a[] = {2, 2};
    CHECK(normalize(a) == Distribution({0.5, 0.5}));
    const double b[] = {0, 3, 0};
    CHECK(normalize(b) == Distribution({0, 1, 0}));
    const double c[] = {0, 0};
    CHECK_THROWS_AS(normalize(c), DegenerateDistribution);
  }

  TEST_CASE("distribution rejects invalid entries") {
    CHECK_THROWS_AS(Distribution({0.5, 0.6}), ContractViolation);
    CHECK_THROWS_AS(Distribution({-0.1, 1.1}), ContractViolation);
    CHECK_THROWS_AS(Distribution({NAN, 1.0}), ContractViolation);
    CHECK_NOTHROW(Distribution({0.0, 1.0}));
  }

  TEST_CASE("argmax breaks ties toward the lowest id") {
    CHECK(Distribution({0.25, 0.375, 0.375}).argmax() == 1);
    CHECK(Distribution({0.5, 0.5}).argmax() == 0);
    CHECK(Distribution::uniform(7).argmax() == 0);
  }

  TEST_CASE("residual examples") {
    CHECK(residual(Distribution({0.5, 0.5}), Distribution({1, 0})) == Distribution({0, 1}));
    CHECK(residual(Distribution({0.6, 0.4}), Distribution({0.2, 0.8})) == Distribution({1, 0}));
    CHECK_THROWS_AS(residual(Distribution({0.3, 0.7}), Distribution({0.3, 0.7})), DegenerateDistribution);
  }

  TEST_CASE("residual identity on random pairs") {
    RandomSource rng(11);
    for (int trial = 0; trial < 2000; ++trial) {
      const std::size_t v = 2 + rng.next_u64() % 7;
      const Distribution p = testing::random_sparse_dist(v, rng);
      const Distribution q = testing::random_sparse_dist(v, rng);
      if (p == q) continue;
      const Distribution r = residual(p, q);
      CHECK(std::abs(r.sum() - 1.0) <= 1e-9);
      for (std::size_t x = 0; x < v; ++x)
        if (q[static_cast<TokenId>(x)] >= p[static_cast<TokenId>(x)]) CHECK(r[static_cast<TokenId>(x)] == 0.0);
    }
  }

  TEST_CASE("speculative sampling completeness identity") {
    // p(x) = min(p, q)(x) + (1 - sum min(p, q)) * residual(p, q)(x)
    RandomSource rng(12);
    for (int trial = 0; trial < 5000; ++trial) {
      const std::size_t v = 2 + rng.next_u64() % 7;
      const Distribution p = testing::random_sparse_dist(v, rng);
      const Distribution q = testing::random_sparse_dist(v, rng);
      double overlap = 0.0;
      for (std::size_t x = 0; x < v; ++x) overlap += std::min(p.probs()[x], q.probs()[x]);
      if (p == q) continue;
      const Distribution r = residual(p, q);
      for (std::size_t x = 0; x < v; ++x) {
        const double rebuilt = std::min(p.probs()[x], q.probs()[x]) + (1.0 - overlap) * r.probs()[x];
        CHECK(std::abs(rebuilt - p.probs()[x]) <= 1e-12);
      }
    }
  }

  TEST_CASE("sample follows the inverse CDF") {
    RandomSource rng(0);
    CHECK(sample(Distribution({1, 0, 0}), rng) == 0);
    for (std::uint64_t seed = 0; seed < 64; ++seed) {
      RandomSource probe(seed), draw(seed);
      const double u = probe.uniform();
      CHECK(sample(Distribution({0.5, 0.5}), draw) == (u < 0.5 ? 0 : 1));
    }
  }

  TEST_CASE("sample frequencies converge") {
    RandomSource rng(99);
    const Distribution d({0.1, 0.2, 0.7});
    std::vector<double> counts(3, 0.0);
    const int n = 1000000;
    for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(sample(d, rng))] += 1.0;
    for (std::size_t x = 0; x < 3; ++x) CHECK(std::abs(counts[x] / n - d.probs()[x]) <= 0.003);
  }

  TEST_CASE("sample never returns a zero-probability token") {
    RandomSource rng(5);
    const Distribution d({0.0, 0.3, 0.0, 0.7, 0.0});
    for (int i = 0; i < 20000; ++i) {
      const TokenId t = sample(d, rng);
      CHECK((t == 1 || t == 3));
    }
  }

  TEST_CASE("random streams are reproducible") {
    RandomSource a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
      const double x = a.uniform();
      CHECK(x == b.uniform());
      CHECK(x >= 0.0);
      CHECK(x < 1.0);
      differs = differs || x != c.uniform();
    }
    CHECK(differs);
    CHECK(RandomSource::split(1, 2) == RandomSource::split(1, 2));
    CHECK(RandomSource::split(1, 2) != RandomSource::split(1, 3));
    CHECK(RandomSource::split(1, 2) != RandomSource::split(2, 2));
  }

  TEST_CASE("evaluate contract") {
    RandomSource rng(3);
    auto m = testing::random_markov("m", 4, rng);
    const TokenSeq t{1, 2, 3};
    CHECK(m->evaluate(t, 4).size() == 1);
    CHECK(m->evaluate(t, 1).size() == 4);
    CHECK_THROWS_AS(m->evaluate(t, 0), ContractViolation);
    CHECK_THROWS_AS(m->evaluate(t, 5), ContractViolation);
    CHECK_THROWS_AS(m->evaluate(TokenSeq{1, 9}, 1), ContractViolation);
  }

  TEST_CASE("evaluate matches one-step queries and is pure") {
    RandomSource rng(4);
    auto m = testing::random_markov("m", 6, rng);
    for (int trial = 0; trial < 50; ++trial) {
      TokenSeq t;
      const std::size_t n = 1 + rng.next_u64() % 10;
      for (std::size_t i = 0; i < n; ++i) t.push_back(static_cast<TokenId>(rng.next_u64() % 6));
      const std::size_t start = 1 + rng.next_u64() % (n + 1);
      const auto batch = m->evaluate(t, start);
      REQUIRE(batch.size() == n - start + 2);
      for (std::size_t p = start; p <= n + 1; ++p) {
        const auto one = m->next(std::span<const TokenId>(t).first(p - 1));
        CHECK(one == batch[p - start]);
      }
      CHECK(m->evaluate(t, start) == batch);
    }
  }

  TEST_CASE("markov model point-mass lookup") {
    // P(b | a) = 1 with a = 0, b = 1.
    std::vector<Distribution> rows{Distribution({0, 1}), Distribution({0.5, 0.5})};
    MarkovModel m("bigram", Distribution::uniform(2), rows, 1.0);
    const auto d = m.evaluate(TokenSeq{0, 1}, 2);
    CHECK(d.front() == Distribution({0, 1}));
  }

  TEST_CASE("byte vocabulary round-trips text") {
    const std::string text = "ab\ncd \x01\xff";
    const Vocab v = Vocab::build(TokenizerKind::Byte, text);
    CHECK(v.size() == 3 + 8);
    CHECK(v.tokenize("ab").size() == 2);
    CHECK(v.detokenize(v.tokenize(text)) == text);
    CHECK(v.tokenize("z").front() == Vocab::kUnk);
    for (TokenId id = 0; id < static_cast<TokenId>(v.size()); ++id) CHECK(v.id_of(v.piece_of(id)) == id);
    CHECK(Vocab::from_serialized(TokenizerKind::Byte, v.serialized_pieces()) == v);
    CHECK(Vocab::build(TokenizerKind::Byte, text) == v);
  }

  TEST_CASE("word vocabulary") {
    const Vocab v = Vocab::build(TokenizerKind::Word, "the cat the dog");
    CHECK(v.size() == 3 + 3);
    const auto t = v.tokenize("the bird");
    CHECK(t.size() == 2);
    CHECK(t[1] == Vocab::kUnk);
    CHECK(v.detokenize(v.tokenize("the cat")) == "the cat");
  }

  TEST_CASE("opaque vocabulary parses id lists") {
    const Vocab v = Vocab::opaque(5);
    CHECK(v.tokenize("0 4 2") == TokenSeq{0, 4, 2});
    CHECK_THROWS_AS(v.tokenize("7"), ContractViolation);
    CHECK(v.detokenize(TokenSeq{1, 2}) == "1 2");
  }

  TEST_CASE("alias keeps scoring and renames") {
    RandomSource rng(8);
    auto m = testing::random_markov("inner", 3, rng, 2.0);
    auto a = std::make_shared<AliasModel>(m, "outer", 0.5);
    CHECK(a->descriptor() == "outer");
    CHECK(a->cost_weight() == 0.5);
    CHECK(a->evaluate(TokenSeq{1, 2}, 1) == m->evaluate(TokenSeq{1, 2}, 1));
  }
}
