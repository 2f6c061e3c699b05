#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "csd/core.hpp"
#include "csd/kernel.hpp"

namespace csd {

// Upper-triangular draft budgets. Row r belongs to the recursion level whose
// reviewer is the r-th model from the top (row 0: the target); entry (r, c)
// with c >= r is the token budget of the horizontal stage drafted by draft c.
// A zero entry skips that stage. The matrix is square with one row and one
// column per draft model.
class KMatrix {
 public:
  KMatrix() = default;
  explicit KMatrix(std::vector<std::vector<std::size_t>> rows);
  static KMatrix single(std::size_t k) { return KMatrix(std::vector<std::vector<std::size_t>>{{k}}); }

  std::size_t size() const { return rows_.size(); }
  std::size_t at(std::size_t row, std::size_t col) const { return rows_[row][col]; }
  // Budgets of the top level, one per draft.
  std::span<const std::size_t> first_row() const;
  // Trailing square block starting at (offset, offset).
  KMatrix sub(std::size_t offset) const;
  const std::vector<std::vector<std::size_t>>& rows() const { return rows_; }

 private:
  std::vector<std::vector<std::size_t>> rows_;
};

struct StageRecord {
  // Recursion depth of the reviewing call (0: target review).
  int level = 0;
  // Horizontal stage of the parent call this review served (-1 at the top).
  int stage = -1;
  std::string model;
  std::size_t proposed = 0;
  std::size_t accepted = 0;
  std::vector<bool> positional_accept;

  bool operator==(const StageRecord&) const = default;
};

struct GenerationTrace {
  std::string target;
  std::vector<StageRecord> steps;
  std::map<std::string, std::size_t> calls_per_model;
  std::map<std::string, double> cost_weights;
  std::size_t tokens_emitted = 0;
  double cost_units = 0.0;
  std::vector<std::string> warnings;

  void record_call(const LanguageModel& model);
  std::size_t calls(const std::string& model) const;
  std::size_t target_calls() const { return calls(target); }
  // Sums counts from another run of the same configuration.
  void merge(const GenerationTrace& other);

  bool operator==(const GenerationTrace&) const = default;
};

struct CascadeConfig {
  ModelPtr target;
  // Largest to smallest; the last one is typically the Max-Gram drafter.
  std::vector<ModelPtr> drafts;
  KMatrix k_matrix;
  // Applied at internal reviews only; the target always reviews exactly.
  Lenience lenience;
  DecodeMode mode = DecodeMode::Greedy;
  std::size_t max_new_tokens = 0;
  std::vector<TokenId> stop_tokens;
  std::uint64_t seed = 0;
  // Internal lenience in sampling mode breaks exactness of the final output;
  // it is rejected unless this is set.
  bool allow_inexact_sampling = false;

  void validate() const;
};

struct GenerationResult {
  // Prompt followed by the generated tokens.
  TokenSeq tokens;
  GenerationTrace trace;
};

// Tokens forwarded to the caller together with the reviewing model's
// probability (and, in sampling mode, distribution) at each position.
struct CascadeBlock {
  TokenSeq tokens;
  std::vector<double> probs;
  std::vector<Distribution> dists;
};

// One recursive cascade drafting step. With no drafts the reviewer drafts
// directly (block_span() tokens per call); otherwise each horizontal stage
// accumulates at least its budget from recursive calls on the smaller models
// and the reviewer checks everything in one parallel call.
CascadeBlock csd_step(const LanguageModel& reviewer, std::span<const ModelPtr> drafts, std::span<const TokenId> prefix,
                      const KMatrix& k_matrix, Lenience lenience, bool is_outermost, DecodeMode mode,
                      RandomSource& rng, GenerationTrace& trace, int level = 0, int stage = -1);

GenerationResult generate(const CascadeConfig& config, std::span<const TokenId> prompt);

GenerationResult autoregressive_generate(const LanguageModel& model, std::span<const TokenId> prompt,
                                         std::size_t max_new_tokens, DecodeMode mode, RandomSource& rng,
                                         std::span<const TokenId> stop_tokens = {});

GenerationResult sd_generate(const LanguageModel& target, const LanguageModel& draft, std::size_t k, Lenience lenience,
                             std::span<const TokenId> prompt, std::size_t max_new_tokens, DecodeMode mode,
                             RandomSource& rng, std::span<const TokenId> stop_tokens = {});

}  // namespace csd
