#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "csd/core.hpp"

namespace csd {

// Sparse conditional row: (token, probability) pairs sorted by token.
using SparseRow = std::vector<std::pair<TokenId, double>>;

namespace detail {
struct KeyHash {
  using is_transparent = void;
  std::size_t operator()(std::string_view s) const noexcept { return std::hash<std::string_view>{}(s); }
};
// Context key: the raw bytes of the context token ids.
using ContextTable = std::unordered_map<std::string, SparseRow, KeyHash, std::equal_to<>>;

std::string context_key(std::span<const TokenId> context);
// "3 17 4" spelling used in model files; "" is the empty context.
std::string context_key_text(std::string_view key);
std::string context_key_from_text(std::string_view text);
}  // namespace detail

struct Smoothing {
  // Interpolation weight of the maximum-likelihood estimate at each order
  // 2..n (index 0 is order 2). Missing entries default to `default_weight`.
  std::vector<double> weights;
  double default_weight = 0.9;
  // Mass mixed into the unigram level from the uniform distribution.
  double uniform_weight = 0.0;

  double weight_for_order(std::size_t order) const;
};

// Interpolated backoff n-gram model. Conditional tables hold maximum-likelihood
// rows; evaluation mixes every order whose context was seen in training,
// lowest order first, so unseen contexts fall back to shorter ones.
class NGramModel final : public LanguageModel {
 public:
  NGramModel(std::string name, Vocab vocab, std::size_t order, Smoothing smoothing,
             std::vector<detail::ContextTable> tables, std::optional<double> cost_weight = std::nullopt);

  const Vocab& vocab() const override { return vocab_; }
  double cost_weight() const override { return cost_; }
  std::string descriptor() const override { return name_; }

  std::size_t order() const { return order_; }
  const Smoothing& smoothing() const { return smoothing_; }
  // tables()[k] holds contexts of length k.
  const std::vector<detail::ContextTable>& tables() const { return tables_; }
  // Number of stored (context, token) entries; the default cost weight.
  std::size_t table_size() const;
  // Maximum-likelihood row for a context, if it was seen in training.
  const SparseRow* ml_row(std::span<const TokenId> context) const;

 protected:
  std::vector<Distribution> do_evaluate(std::span<const TokenId> tokens, std::size_t start) const override;

 private:
  Distribution at(std::span<const TokenId> context) const;

  std::string name_;
  Vocab vocab_;
  std::size_t order_;
  Smoothing smoothing_;
  std::vector<detail::ContextTable> tables_;
  std::vector<double> base_;  // unigram level, already mixed with uniform
  double cost_;
};

// Row-normalized previous-token -> next-token table. Unseen rows (and the
// empty context) are uniform.
class BigramTable final : public LanguageModel {
 public:
  BigramTable(std::string name, Vocab vocab, detail::ContextTable rows, std::optional<double> cost_weight = std::nullopt);

  const Vocab& vocab() const override { return vocab_; }
  double cost_weight() const override { return cost_; }
  std::string descriptor() const override { return name_; }

  const detail::ContextTable& rows() const { return rows_; }
  std::size_t table_size() const;
  Distribution row(std::optional<TokenId> previous) const;

 protected:
  std::vector<Distribution> do_evaluate(std::span<const TokenId> tokens, std::size_t start) const override;

 private:
  std::string name_;
  Vocab vocab_;
  detail::ContextTable rows_;
  double cost_;
};

enum class MatchPolicy { PromptOnly, PromptAndGeneration };

std::string_view to_string(MatchPolicy policy);
MatchPolicy match_policy_from_string(std::string_view name);

// Longest suffix of `generated` that occurs contiguously in `corpus`; the
// earliest occurrence wins ties. Returns the up-to-n tokens that follow that
// occurrence (possibly none when it ends the corpus), or nullopt when the
// last generated token never occurs in the corpus.
std::optional<TokenSeq> mag_propose(std::span<const TokenId> generated, std::span<const TokenId> corpus, std::size_t n);

// Max-Gram drafter: copies the continuation of the longest suffix match and
// falls back to a bigram row when nothing matches. Emits `span` tokens per
// drafting invocation.
class MagModel final : public LanguageModel {
 public:
  MagModel(std::string name, std::shared_ptr<const BigramTable> fallback, std::size_t span, MatchPolicy policy,
           double cost_weight = 0.0);

  const Vocab& vocab() const override { return fallback_->vocab(); }
  double cost_weight() const override { return cost_; }
  std::string descriptor() const override { return name_; }
  std::size_t block_span() const override { return span_; }
  std::shared_ptr<const LanguageModel> bind_prompt(std::span<const TokenId> prompt) const override;

  const BigramTable& fallback() const { return *fallback_; }
  std::size_t span() const { return span_; }
  MatchPolicy policy() const { return policy_; }
  // Next token copied from a match for this context, if any.
  std::optional<TokenId> copied_next(std::span<const TokenId> context) const;

 protected:
  std::vector<Distribution> do_evaluate(std::span<const TokenId> tokens, std::size_t start) const override;

 private:
  std::string name_;
  std::shared_ptr<const BigramTable> fallback_;
  std::size_t span_;
  MatchPolicy policy_;
  double cost_;
  std::optional<TokenSeq> prompt_;
};

NGramModel train_ngram(std::string name, const Vocab& vocab, std::span<const TokenId> corpus, std::size_t order,
                       Smoothing smoothing = {});
BigramTable train_bigram(std::string name, const Vocab& vocab, std::span<const TokenId> corpus);

// Cross-entropy based perplexity of `model` on `tokens` (positions 2..n).
double perplexity(const LanguageModel& model, std::span<const TokenId> tokens);

// Model files: one JSON document per model (see docs/formats.md).
std::shared_ptr<LanguageModel> load_model(const std::string& path);
std::shared_ptr<LanguageModel> model_from_json(const std::string& text, const std::string& origin = "<memory>");
std::string model_to_json(const LanguageModel& model);
void save_model(const LanguageModel& model, const std::string& path);

}  // namespace csd
