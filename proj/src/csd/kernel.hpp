#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "csd/core.hpp"

namespace csd {

enum class DecodeMode { Sampling, Greedy };

std::string_view to_string(DecodeMode mode);
DecodeMode decode_mode_from_string(std::string_view name);

// Acceptance loosening factor, l >= 1. l == 1 is an exact review: in greedy
// mode it accepts argmax matches only.
class Lenience {
 public:
  Lenience() = default;
  explicit Lenience(double l);

  double value() const { return l_; }
  bool exact() const { return l_ == 1.0; }

 private:
  double l_ = 1.0;
};

struct DraftBatch {
  TokenSeq tokens;
  // Full proposer distributions per position; required in sampling mode.
  std::vector<Distribution> proposal_dists;
  // Proposer probability of each proposed token, each in (0, 1].
  std::vector<double> proposal_probs;

  std::size_t size() const { return tokens.size(); }
  void validate(DecodeMode mode) const;
};

struct ReviewOutcome {
  std::size_t accepted_count = 0;
  // Accepted tokens followed by one correction (on rejection) or bonus token.
  TokenSeq emitted;
  // Reviewer probability of each emitted token.
  std::vector<double> emitted_probs;
  // Reviewer distribution at each emitted position (sampling mode only); the
  // next level up uses these as proposal distributions.
  std::vector<Distribution> emitted_dists;
  bool rejected = false;
};

// One speculative review. `reviewer_dists` holds one distribution per draft
// position plus the bonus position.
ReviewOutcome speculative_review(std::span<const Distribution> reviewer_dists, const DraftBatch& draft,
                                 Lenience lenience, DecodeMode mode, RandomSource& rng);

// Probability that a token drawn from `draft` passes a sampling review against
// `target`: min(1, sum_x min(q(x), l * p(x))).
double acceptance_probability(const Distribution& target, const Distribution& draft, Lenience lenience);

// Drafts k tokens autoregressively from `draft` and reviews them with one
// parallel call of `target`: exactly 1 target call and k draft calls.
ReviewOutcome sd_step(const LanguageModel& target, const LanguageModel& draft, std::size_t k, Lenience lenience,
                      std::span<const TokenId> prefix, DecodeMode mode, RandomSource& rng);

}  // namespace csd
