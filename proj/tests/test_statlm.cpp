#include <cmath>
#include <filesystem>

#include "csd/statlm.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace csd;

namespace {

// Brute force: try every suffix length from the longest down and every start
// position from the left.
std::optional<TokenSeq> oracle_propose(const TokenSeq& generated, const TokenSeq& corpus, std::size_t n) {
  for (std::size_t len = generated.size(); len >= 1; --len) {
    for (std::size_t s = 0; s + len <= corpus.size(); ++s) {
      bool ok = true;
      for (std::size_t i = 0; i < len && ok; ++i) ok = corpus[s + i] == generated[generated.size() - len + i];
      if (ok) {
        const std::size_t to = std::min(corpus.size(), s + len + n);
        return TokenSeq(corpus.begin() + static_cast<std::ptrdiff_t>(s + len),
                        corpus.begin() + static_cast<std::ptrdiff_t>(to));
      }
    }
  }
  return std::nullopt;
}

TokenSeq random_seq(RandomSource& rng, std::size_t max_len, std::size_t v) {
  TokenSeq t(1 + rng.next_u64() % max_len);
  for (auto& x : t) x = static_cast<TokenId>(rng.next_u64() % v);
  return t;
}

void check_normalized(const std::vector<Distribution>& ds) {
  for (const auto& d : ds) CHECK(std::abs(d.sum() - 1.0) <= 1e-9);
}

Vocab abc_vocab() { return Vocab::build(TokenizerKind::Byte, "abc"); }

}  // namespace

TEST_SUITE("statlm") {
  TEST_CASE("bigram counts on an alternating corpus") {
    const Vocab v = abc_vocab();
    const TokenSeq corpus = v.tokenize("ababab");
    const NGramModel m = train_ngram("m2", v, corpus, 2);
    const TokenId a = *v.id_of("a"), b = *v.id_of("b");
    const TokenSeq ctx_a{a}, ctx_b{b};
    const SparseRow* ra = m.ml_row(ctx_a);
    const SparseRow* rb = m.ml_row(ctx_b);
    REQUIRE(ra);
    REQUIRE(rb);
    CHECK(*ra == SparseRow{{b, 1.0}});
    CHECK(*rb == SparseRow{{a, 1.0}});
    const BigramTable t = train_bigram("bi", v, corpus);
    CHECK(t.row(a)[b] == 1.0);
    CHECK(t.row(std::nullopt) == Distribution::uniform(v.size()));
  }

  TEST_CASE("order 1 is the unigram distribution everywhere") {
    const Vocab v = abc_vocab();
    const TokenSeq corpus = v.tokenize("aabbbc");
    const NGramModel m = train_ngram("m1", v, corpus, 1);
    const auto ds = m.evaluate(corpus, 1);
    for (const auto& d : ds) {
      CHECK(d[*v.id_of("a")] == doctest::Approx(2.0 / 6));
      CHECK(d[*v.id_of("b")] == doctest::Approx(3.0 / 6));
      CHECK(d == ds.front());
    }
  }

  TEST_CASE("training errors") {
    const Vocab v = abc_vocab();
    CHECK_THROWS_AS(train_ngram("m", v, TokenSeq{}, 2), TrainingError);
    CHECK_THROWS_AS(train_ngram("m", v, TokenSeq{1, 2}, 0), TrainingError);
  }

  TEST_CASE("trained model beats uniform perplexity on its corpus") {
    const std::string text = "the cat sat on the mat and the cat ate the rat\n";
    const Vocab v = Vocab::build(TokenizerKind::Byte, text);
    const TokenSeq corpus = v.tokenize(text);
    auto uniform = MarkovModel::context_free("u", Distribution::uniform(v.size()), 1.0);
    for (std::size_t order : {1u, 2u, 3u, 5u}) {
      const NGramModel m = train_ngram("m", v, corpus, order);
      CHECK(perplexity(m, corpus) <= perplexity(*uniform, corpus));
    }
  }

  TEST_CASE("ngram evaluate is normalized, batch-consistent and backs off") {
    const std::string text = "abcabcabd abcab cabbage";
    const Vocab v = Vocab::build(TokenizerKind::Byte, text);
    const TokenSeq corpus = v.tokenize(text);
    RandomSource rng(3);
    for (std::size_t order : {2u, 3u, 5u}) {
      Smoothing s;
      s.uniform_weight = order == 5 ? 0.01 : 0.0;
      const NGramModel m = train_ngram("m", v, corpus, order, s);
      for (int trial = 0; trial < 30; ++trial) {
        const TokenSeq t = random_seq(rng, 12, v.size());
        const std::size_t start = 1 + rng.next_u64() % (t.size() + 1);
        const auto batch = m.evaluate(t, start);
        check_normalized(batch);
        for (std::size_t p = start; p <= t.size() + 1; ++p)
          CHECK(batch[p - start] == m.next(std::span<const TokenId>(t).first(p - 1)));
      }
    }
  }

  TEST_CASE("mag_propose examples") {
    CHECK(mag_propose(TokenSeq{9, 2, 3}, TokenSeq{1, 2, 3, 4}, 1) == TokenSeq{4});
    CHECK_FALSE(mag_propose(TokenSeq{7, 8, 9}, TokenSeq{1, 2, 3}, 2).has_value());
    CHECK(mag_propose(TokenSeq{5, 5}, TokenSeq{5, 5, 5, 6}, 1) == TokenSeq{5});
    // Match at the very end of the corpus: nothing follows it.
    CHECK(mag_propose(TokenSeq{1, 2, 3}, TokenSeq{4, 2, 3}, 3) == TokenSeq{});
    // Match at the very start of the corpus.
    CHECK(mag_propose(TokenSeq{8, 1, 2}, TokenSeq{1, 2, 7, 1}, 2) == TokenSeq{7, 1});
  }

  TEST_CASE("mag_propose agrees with the brute-force oracle") {
    RandomSource rng(2024);
    int ties = 0, ends = 0;
    for (int trial = 0; trial < 10000; ++trial) {
      const std::size_t v = 1 + rng.next_u64() % 16;
      const TokenSeq generated = random_seq(rng, 64, v);
      const TokenSeq corpus = random_seq(rng, 64, v);
      const std::size_t n = 1 + rng.next_u64() % 12;
      const auto got = mag_propose(generated, corpus, n);
      const auto want = oracle_propose(generated, corpus, n);
      CHECK(got == want);
      if (want && want->size() < n) ++ends;
      if (v <= 3) ++ties;
    }
    CHECK(ties > 0);
    CHECK(ends > 0);
  }

  TEST_CASE("mag copies from context and falls back to the bigram row") {
    const std::string text = "xyzw qxyz";
    const Vocab v = Vocab::build(TokenizerKind::Byte, text + "k");
    auto bigram = std::make_shared<BigramTable>(train_bigram("bi", v, v.tokenize(text)));
    MagModel mag("mag", bigram, 4, MatchPolicy::PromptAndGeneration);
    const TokenSeq ctx = v.tokenize("xyzw qxy");
    CHECK(mag.next(ctx) == Distribution::point_mass(v.size(), *v.id_of("z")));
    // "k" never occurred before: the bigram row of "k" (unseen, uniform).
    const TokenSeq fresh = v.tokenize("xyk");
    CHECK(mag.next(fresh) == bigram->row(*v.id_of("k")));
    // The final token only matches itself: no copy.
    const TokenSeq once = v.tokenize("xq");
    CHECK(mag.next(once) == bigram->row(*v.id_of("q")));
    CHECK(mag.evaluate(ctx, 1) == mag.evaluate(ctx, 1));
  }

  TEST_CASE("prompt-only mag matches inside the bound prompt") {
    const Vocab v = Vocab::build(TokenizerKind::Byte, "abcdef");
    auto bigram = std::make_shared<BigramTable>(train_bigram("bi", v, v.tokenize("abcdef")));
    auto mag = std::make_shared<MagModel>("mag", bigram, 3, MatchPolicy::PromptOnly);
    const TokenSeq prompt = v.tokenize("abcd");
    auto bound = mag->bind_prompt(prompt);
    CHECK(bound->next(v.tokenize("fab")) == Distribution::point_mass(v.size(), *v.id_of("c")));
    // Generation-only repeats are invisible to the prompt-only policy.
    CHECK(bound->next(v.tokenize("abcdefe")) == bigram->row(*v.id_of("e")));
    CHECK(mag->next(v.tokenize("fab")) == bigram->row(*v.id_of("b")));
  }

  TEST_CASE("default cost weights encode mag << bigram <= ngram") {
    const std::string text = "some text with some repetition in some places";
    const Vocab v = Vocab::build(TokenizerKind::Byte, text);
    const TokenSeq corpus = v.tokenize(text);
    auto bigram = std::make_shared<BigramTable>(train_bigram("bi", v, corpus));
    MagModel mag("mag", bigram, 10, MatchPolicy::PromptAndGeneration);
    CHECK(mag.cost_weight() < bigram->cost_weight());
    for (std::size_t order : {2u, 3u, 5u, 7u}) CHECK(bigram->cost_weight() <= train_ngram("m", v, corpus, order).cost_weight());
  }

  TEST_CASE("model files reload bit-faithfully") {
    const std::string text = "to be or not to be, that is the question\n";
    const Vocab v = Vocab::build(TokenizerKind::Byte, text + "\x01");
    const TokenSeq corpus = v.tokenize(text);
    Smoothing s;
    s.weights = {0.8, 0.7};
    s.uniform_weight = 0.013;
    auto ngram = std::make_shared<NGramModel>(train_ngram("m4", v, corpus, 4, s));
    auto bigram = std::make_shared<BigramTable>(train_bigram("bi", v, corpus));
    auto mag = std::make_shared<MagModel>("mag", bigram, 7, MatchPolicy::PromptOnly, 0.25);
    const auto dir = std::filesystem::temp_directory_path() / "csd_statlm_test";
    std::filesystem::create_directories(dir);
    RandomSource rng(9);
    for (ModelPtr m : std::vector<ModelPtr>{ngram, bigram, mag}) {
      const std::string path = (dir / (m->descriptor() + ".json")).string();
      save_model(*m, path);
      auto back = load_model(path);
      CHECK(back->descriptor() == m->descriptor());
      CHECK(back->cost_weight() == m->cost_weight());
      CHECK(back->vocab() == m->vocab());
      CHECK(back->block_span() == m->block_span());
      CHECK(model_to_json(*back) == model_to_json(*m));
      const TokenSeq prompt = v.tokenize("not to");
      auto bm = m->bind_prompt(prompt);
      auto bb = back->bind_prompt(prompt);
      for (int trial = 0; trial < 20; ++trial) {
        const TokenSeq t = random_seq(rng, 15, v.size());
        CHECK(bb->evaluate(t, 1) == bm->evaluate(t, 1));
      }
    }
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("model loading errors") {
    CHECK_THROWS_AS(load_model("/nonexistent/model.json"), IoError);
    CHECK_THROWS_AS(model_from_json("{not json"), ConfigError);
    CHECK_THROWS_AS(model_from_json(R"({"format_version":2,"type":"ngram"})"), ConfigError);
    CHECK_THROWS_AS(model_from_json(R"({"format_version":1,"type":"unknown"})"), ConfigError);
  }
}
