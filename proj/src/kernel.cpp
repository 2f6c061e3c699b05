#include "csd/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace csd {

std::string_view to_string(DecodeMode mode) { return mode == DecodeMode::Greedy ? "greedy" : "sampling"; }

DecodeMode decode_mode_from_string(std::string_view name) {
  if (name == "greedy") return DecodeMode::Greedy;
  if (name == "sampling") return DecodeMode::Sampling;
  throw ConfigError("unknown decode mode '" + std::string(name) + "' (expected greedy or sampling)");
}

Lenience::Lenience(double l) : l_(l) {
  if (!(std::isfinite(l) && l >= 1.0)) throw ContractViolation("lenience must be a finite value >= 1, got " + std::to_string(l));
}

void DraftBatch::validate(DecodeMode mode) const {
  require(proposal_probs.size() == tokens.size(), "draft batch: tokens and proposal_probs differ in length");
  for (double q : proposal_probs) require(q > 0.0 && q <= 1.0, "draft batch: proposal probability outside (0, 1]");
  if (mode == DecodeMode::Sampling) {
    require(proposal_dists.size() == tokens.size(), "sampling review needs a proposal distribution per draft token");
    for (std::size_t i = 0; i < tokens.size(); ++i)
      require(std::abs(proposal_dists[i][tokens[i]] - proposal_probs[i]) <= 1e-12,
              "draft batch: proposal probability disagrees with its distribution");
  }
}

namespace {

void emit(ReviewOutcome& out, TokenId token, const Distribution& reviewer, DecodeMode mode) {
  out.emitted.push_back(token);
  out.emitted_probs.push_back(reviewer[token]);
  if (mode == DecodeMode::Sampling) out.emitted_dists.push_back(reviewer);
}

TokenId correction_token(const Distribution& reviewer, const Distribution& proposer, RandomSource& rng) {
  try {
    return sample(residual(reviewer, proposer), rng);
  } catch (const DegenerateDistribution&) {
    // Identical distributions: any draw from the reviewer is exact.
    return sample(reviewer, rng);
  }
}

}  // namespace

ReviewOutcome speculative_review(std::span<const Distribution> reviewer_dists, const DraftBatch& draft,
                                 Lenience lenience, DecodeMode mode, RandomSource& rng) {
  const std::size_t k = draft.size();
  if (reviewer_dists.size() != k + 1)
    throw ContractViolation("review needs " + std::to_string(k + 1) + " reviewer distributions, got " +
                            std::to_string(reviewer_dists.size()));
  draft.validate(mode);
  const double l = lenience.value();

  ReviewOutcome out;
  out.emitted.reserve(k + 1);
  out.emitted_probs.reserve(k + 1);
  for (std::size_t i = 0; i < k; ++i) {
    const Distribution& p = reviewer_dists[i];
    const TokenId x = draft.tokens[i];
    const double q = draft.proposal_probs[i];
    const double lp = l * p[x];
    bool accept;
    if (mode == DecodeMode::Greedy) {
      accept = x == p.argmax() || (!lenience.exact() && q <= lp);
    } else {
      // Reject with probability clamp(1 - l*p/q); only draw when it is positive.
      accept = q <= lp || rng.uniform() < lp / q;
    }
    if (!accept) {
      const TokenId fix = mode == DecodeMode::Greedy ? p.argmax() : correction_token(p, draft.proposal_dists[i], rng);
      emit(out, fix, p, mode);
      out.rejected = true;
      return out;
    }
    emit(out, x, p, mode);
    ++out.accepted_count;
  }
  const Distribution& bonus = reviewer_dists[k];
  emit(out, mode == DecodeMode::Greedy ? bonus.argmax() : sample(bonus, rng), bonus, mode);
  return out;
}

double acceptance_probability(const Distribution& target, const Distribution& draft, Lenience lenience) {
  require(target.size() == draft.size(), "acceptance probability over mismatched vocabularies");
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i)
    total += std::min(draft.probs()[i], lenience.value() * target.probs()[i]);
  return std::min(1.0, total);
}

ReviewOutcome sd_step(const LanguageModel& target, const LanguageModel& draft, std::size_t k, Lenience lenience,
                      std::span<const TokenId> prefix, DecodeMode mode, RandomSource& rng) {
  require(k >= 1, "sd_step needs k >= 1");
  require(target.vocab().size() == draft.vocab().size(), "target and draft vocabularies differ in size");
  TokenSeq seq(prefix.begin(), prefix.end());
  DraftBatch batch;
  batch.tokens.reserve(k);
  batch.proposal_probs.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    Distribution d = draft.next(seq);
    const TokenId t = mode == DecodeMode::Greedy ? d.argmax() : sample(d, rng);
    batch.tokens.push_back(t);
    batch.proposal_probs.push_back(d[t]);
    if (mode == DecodeMode::Sampling) batch.proposal_dists.push_back(std::move(d));
    seq.push_back(t);
  }
  auto reviewer = target.evaluate(seq, prefix.size() + 1);
  return speculative_review(reviewer, batch, lenience, mode, rng);
}

}  // namespace csd
