#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "csd/errors.hpp"

namespace csd {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

enum class TokenizerKind { Byte, Word, Opaque };

std::string_view to_string(TokenizerKind kind);
TokenizerKind tokenizer_from_string(std::string_view name);

// Byte and word vocabularies reserve ids 0..2 for <bos>, <eos>, <unk>.
// Opaque vocabularies (remote and synthetic models) have no reserved ids.
class Vocab {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kUnk = 2;

  Vocab() = default;

  static Vocab opaque(std::size_t size);
  // Builds a vocabulary from text: reserved ids first, then the distinct
  // bytes (or whitespace-separated words) of `text` in sorted order.
  static Vocab build(TokenizerKind kind, std::string_view text);
  // Pieces as produced by serialized_pieces(); the reserved pieces must lead.
  static Vocab from_serialized(TokenizerKind kind, const std::vector<std::string>& pieces);

  std::size_t size() const { return pieces_.size(); }
  TokenizerKind kind() const { return kind_; }
  bool has_specials() const { return kind_ != TokenizerKind::Opaque; }
  bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < pieces_.size(); }

  const std::string& piece_of(TokenId id) const;
  std::optional<TokenId> id_of(std::string_view piece) const;

  TokenSeq tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> tokens) const;

  // JSON-safe piece spellings: bytes outside printable ASCII become "<0xNN>".
  std::vector<std::string> serialized_pieces() const;

  bool operator==(const Vocab& other) const { return kind_ == other.kind_ && pieces_ == other.pieces_; }

 private:
  Vocab(TokenizerKind kind, std::vector<std::string> pieces);

  TokenizerKind kind_ = TokenizerKind::Opaque;
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
};

class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  std::uint64_t next_u64() { return engine_(); }
  std::uint64_t seed() const { return seed_; }

  // splitmix64 finalizer over (seed, stream); used to derive worker and
  // per-prompt streams from one master seed.
  static std::uint64_t split(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// Dense probability vector over a fixed vocabulary.
class Distribution {
 public:
  Distribution() = default;
  // Takes ownership of already-normalized probabilities. Negative or
  // non-finite entries are rejected.
  explicit Distribution(std::vector<double> probs);

  static Distribution uniform(std::size_t size);
  static Distribution point_mass(std::size_t size, TokenId token);

  std::size_t size() const { return probs_.size(); }
  double operator[](TokenId id) const { return probs_[static_cast<std::size_t>(id)]; }
  std::span<const double> probs() const { return probs_; }
  double sum() const;
  // Lowest id wins ties.
  TokenId argmax() const;

  bool operator==(const Distribution& other) const = default;

 private:
  std::vector<double> probs_;
};

// Throws DegenerateDistribution when every weight is zero.
Distribution normalize(std::span<const double> weights);
// normalize(max(0, target - draft)) elementwise.
Distribution residual(const Distribution& target, const Distribution& draft);
// Inverse-CDF sampling in ascending id order.
TokenId sample(const Distribution& dist, RandomSource& rng);

// Parallel scoring contract shared by every model family. Implementations are
// immutable after construction and safe to share between threads.
class LanguageModel : public std::enable_shared_from_this<LanguageModel> {
 public:
  virtual ~LanguageModel() = default;

  virtual const Vocab& vocab() const = 0;
  virtual double cost_weight() const = 0;
  virtual std::string descriptor() const = 0;

  // Returns one distribution for each 1-based position p in
  // [start, tokens.size() + 1]; the distribution at p conditions on the first
  // p - 1 tokens. The last entry scores the token after the whole sequence.
  std::vector<Distribution> evaluate(std::span<const TokenId> tokens, std::size_t start) const;
  Distribution next(std::span<const TokenId> tokens) const;

  // Tokens produced per invocation when this model drafts without a smaller
  // helper. Statistical copy models emit whole spans at once.
  virtual std::size_t block_span() const { return 1; }
  virtual bool deterministic() const { return true; }
  // Models whose behavior depends on the prompt (prompt-only matching)
  // return a bound copy; everything else returns itself.
  virtual std::shared_ptr<const LanguageModel> bind_prompt(std::span<const TokenId> prompt) const;

 protected:
  virtual std::vector<Distribution> do_evaluate(std::span<const TokenId> tokens, std::size_t start) const = 0;
};

using ModelPtr = std::shared_ptr<const LanguageModel>;

// Same scoring as the wrapped model under another name and cost.
class AliasModel final : public LanguageModel {
 public:
  AliasModel(ModelPtr inner, std::string name, double cost_weight);

  const Vocab& vocab() const override { return inner_->vocab(); }
  double cost_weight() const override { return cost_; }
  std::string descriptor() const override { return name_; }
  std::size_t block_span() const override { return inner_->block_span(); }
  bool deterministic() const override { return inner_->deterministic(); }
  std::shared_ptr<const LanguageModel> bind_prompt(std::span<const TokenId> prompt) const override;

 protected:
  std::vector<Distribution> do_evaluate(std::span<const TokenId> tokens, std::size_t start) const override {
    return inner_->evaluate(tokens, start);
  }

 private:
  ModelPtr inner_;
  std::string name_;
  double cost_;
};

// First-order Markov model over an opaque vocabulary: the next-token
// distribution depends only on the previous token. `rows` holds one row per
// previous token; a single row makes the model context-free. `initial` is
// used for the empty context.
class MarkovModel final : public LanguageModel {
 public:
  MarkovModel(std::string name, Distribution initial, std::vector<Distribution> rows, double cost_weight);
  static std::shared_ptr<MarkovModel> context_free(std::string name, Distribution dist, double cost_weight);

  const Vocab& vocab() const override { return vocab_; }
  double cost_weight() const override { return cost_; }
  std::string descriptor() const override { return name_; }

  const Distribution& initial() const { return initial_; }
  const std::vector<Distribution>& rows() const { return rows_; }
  // Distribution following `previous` (or the initial row for nullopt).
  const Distribution& row_after(std::optional<TokenId> previous) const;

 protected:
  std::vector<Distribution> do_evaluate(std::span<const TokenId> tokens, std::size_t start) const override;

 private:
  std::string name_;
  Vocab vocab_;
  Distribution initial_;
  std::vector<Distribution> rows_;
  double cost_;
};

}  // namespace csd
