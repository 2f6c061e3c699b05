#include "csd/cascade.hpp"

#include <algorithm>

namespace csd {

// ---------------------------------------------------------------- KMatrix

KMatrix::KMatrix(std::vector<std::vector<std::size_t>> rows) : rows_(std::move(rows)) {
  const std::size_t n = rows_.size();
  for (std::size_t r = 0; r < n; ++r) {
    if (rows_[r].size() != n)
      throw ContractViolation("k-matrix must be square: row " + std::to_string(r) + " has " +
                              std::to_string(rows_[r].size()) + " entries, expected " + std::to_string(n));
    for (std::size_t c = 0; c < r; ++c)
      if (rows_[r][c] != 0) throw ContractViolation("k-matrix must be upper-triangular (entries below the diagonal are 0)");
  }
}

std::span<const std::size_t> KMatrix::first_row() const {
  if (rows_.empty()) return {};
  return rows_.front();
}

KMatrix KMatrix::sub(std::size_t offset) const {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t r = offset; r < rows_.size(); ++r)
    out.emplace_back(rows_[r].begin() + static_cast<std::ptrdiff_t>(offset), rows_[r].end());
  return KMatrix(std::move(out));
}

// ---------------------------------------------------------------- trace

void GenerationTrace::record_call(const LanguageModel& model) {
  const std::string name = model.descriptor();
  ++calls_per_model[name];
  cost_weights.emplace(name, model.cost_weight());
  cost_units += model.cost_weight();
}

std::size_t GenerationTrace::calls(const std::string& model) const {
  auto it = calls_per_model.find(model);
  return it == calls_per_model.end() ? 0 : it->second;
}

void GenerationTrace::merge(const GenerationTrace& other) {
  if (target.empty()) target = other.target;
  steps.insert(steps.end(), other.steps.begin(), other.steps.end());
  for (const auto& [m, n] : other.calls_per_model) calls_per_model[m] += n;
  for (const auto& [m, c] : other.cost_weights) cost_weights.emplace(m, c);
  tokens_emitted += other.tokens_emitted;
  cost_units += other.cost_units;
  for (const auto& w : other.warnings)
    if (std::find(warnings.begin(), warnings.end(), w) == warnings.end()) warnings.push_back(w);
}

// ---------------------------------------------------------------- config

void CascadeConfig::validate() const {
  if (!target) throw ConfigError("cascade has no target model");
  for (const auto& d : drafts) {
    if (!d) throw ConfigError("cascade has a null draft model");
    if (d->vocab().size() != target->vocab().size())
      throw ConfigError("draft '" + d->descriptor() + "' vocabulary size " + std::to_string(d->vocab().size()) +
                        " differs from target size " + std::to_string(target->vocab().size()));
  }
  if (k_matrix.size() != drafts.size())
    throw ConfigError("k-matrix is " + std::to_string(k_matrix.size()) + "x" + std::to_string(k_matrix.size()) +
                      " but the cascade has " + std::to_string(drafts.size()) + " draft models");
  if (mode == DecodeMode::Sampling && !lenience.exact() && !drafts.empty() && !allow_inexact_sampling)
    throw ConfigError("internal lenience > 1 in sampling mode changes the output distribution; "
                      "set allow_inexact_sampling to run it anyway");
  for (TokenId t : stop_tokens)
    if (!target->vocab().contains(t)) throw ConfigError("stop token " + std::to_string(t) + " outside vocabulary");
}

// ---------------------------------------------------------------- cascade step

namespace {

TokenId choose(const Distribution& d, DecodeMode mode, RandomSource& rng) {
  return mode == DecodeMode::Greedy ? d.argmax() : sample(d, rng);
}

// Base case: the model drafts on its own, one invocation.
CascadeBlock draft_directly(const LanguageModel& model, std::span<const TokenId> prefix, DecodeMode mode,
                            RandomSource& rng, GenerationTrace& trace) {
  trace.record_call(model);
  CascadeBlock block;
  TokenSeq seq(prefix.begin(), prefix.end());
  const std::size_t span = model.block_span();
  for (std::size_t i = 0; i < span; ++i) {
    Distribution d = model.next(seq);
    const TokenId t = choose(d, mode, rng);
    block.tokens.push_back(t);
    block.probs.push_back(d[t]);
    if (mode == DecodeMode::Sampling) block.dists.push_back(std::move(d));
    seq.push_back(t);
  }
  return block;
}

}  // namespace

CascadeBlock csd_step(const LanguageModel& reviewer, std::span<const ModelPtr> drafts, std::span<const TokenId> prefix,
                      const KMatrix& k_matrix, Lenience lenience, bool is_outermost, DecodeMode mode,
                      RandomSource& rng, GenerationTrace& trace, int level, int stage) {
  require(!prefix.empty(), "cascade step needs a non-empty prefix");
  if (drafts.empty()) return draft_directly(reviewer, prefix, mode, rng, trace);
  if (k_matrix.size() != drafts.size())
    throw ContractViolation("k-matrix of size " + std::to_string(k_matrix.size()) + " for " +
                            std::to_string(drafts.size()) + " draft models");

  TokenSeq seq(prefix.begin(), prefix.end());
  DraftBatch batch;
  const auto budgets = k_matrix.first_row();
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    const std::size_t budget = budgets[i];
    if (budget == 0) continue;
    const KMatrix sub = k_matrix.sub(i + 1);
    const auto smaller = drafts.subspan(i + 1);
    const std::size_t stage_start = seq.size();
    // Every inner call yields at least one token, so the loop terminates.
    while (seq.size() - stage_start < budget) {
      CascadeBlock inner = csd_step(*drafts[i], smaller, seq, sub, lenience, false, mode, rng, trace, level + 1,
                                    static_cast<int>(i));
      seq.insert(seq.end(), inner.tokens.begin(), inner.tokens.end());
      batch.tokens.insert(batch.tokens.end(), inner.tokens.begin(), inner.tokens.end());
      batch.proposal_probs.insert(batch.proposal_probs.end(), inner.probs.begin(), inner.probs.end());
      for (auto& d : inner.dists) batch.proposal_dists.push_back(std::move(d));
    }
  }

  trace.record_call(reviewer);
  const auto reviewer_dists = reviewer.evaluate(seq, prefix.size() + 1);
  ReviewOutcome outcome =
      speculative_review(reviewer_dists, batch, is_outermost ? Lenience{} : lenience, mode, rng);

  StageRecord rec;
  rec.level = level;
  rec.stage = stage;
  rec.model = reviewer.descriptor();
  rec.proposed = batch.size();
  rec.accepted = outcome.accepted_count;
  rec.positional_accept.assign(batch.size(), false);
  std::fill_n(rec.positional_accept.begin(), outcome.accepted_count, true);
  trace.steps.push_back(std::move(rec));

  return CascadeBlock{std::move(outcome.emitted), std::move(outcome.emitted_probs), std::move(outcome.emitted_dists)};
}

// ---------------------------------------------------------------- generation loops

namespace {

// Appends tokens until the budget or a stop token ends generation; returns
// true when generation is finished.
bool append_tokens(TokenSeq& out, std::span<const TokenId> tokens, std::size_t limit,
                   std::span<const TokenId> stop_tokens) {
  for (TokenId t : tokens) {
    if (out.size() >= limit) return true;
    out.push_back(t);
    if (std::find(stop_tokens.begin(), stop_tokens.end(), t) != stop_tokens.end()) return true;
  }
  return out.size() >= limit;
}

}  // namespace

GenerationResult generate(const CascadeConfig& config, std::span<const TokenId> prompt) {
  config.validate();
  require(!prompt.empty(), "generate needs a non-empty prompt");
  GenerationResult result;
  result.tokens.assign(prompt.begin(), prompt.end());
  result.trace.target = config.target->descriptor();
  if (config.max_new_tokens == 0) return result;

  ModelPtr target = config.target->bind_prompt(prompt);
  std::vector<ModelPtr> drafts;
  drafts.reserve(config.drafts.size());
  for (const auto& d : config.drafts) drafts.push_back(d->bind_prompt(prompt));

  if (config.mode == DecodeMode::Greedy) {
    auto warn = [&](const LanguageModel& m) {
      if (!m.deterministic())
        result.trace.warnings.push_back("model '" + m.descriptor() +
                                        "' reports non-deterministic scoring; greedy equivalence is not guaranteed");
    };
    warn(*target);
    for (const auto& d : drafts) warn(*d);
  }

  RandomSource rng(config.seed);
  const std::size_t limit = prompt.size() + config.max_new_tokens;
  bool done = false;
  while (!done) {
    CascadeBlock block = csd_step(*target, drafts, result.tokens, config.k_matrix, config.lenience, true, config.mode,
                                  rng, result.trace);
    done = append_tokens(result.tokens, block.tokens, limit, config.stop_tokens);
  }
  result.trace.tokens_emitted = result.tokens.size() - prompt.size();
  return result;
}

GenerationResult autoregressive_generate(const LanguageModel& model, std::span<const TokenId> prompt,
                                         std::size_t max_new_tokens, DecodeMode mode, RandomSource& rng,
                                         std::span<const TokenId> stop_tokens) {
  require(!prompt.empty(), "generate needs a non-empty prompt");
  GenerationResult result;
  result.tokens.assign(prompt.begin(), prompt.end());
  result.trace.target = model.descriptor();
  const std::size_t limit = prompt.size() + max_new_tokens;
  bool done = max_new_tokens == 0;
  while (!done) {
    result.trace.record_call(model);
    const TokenId t = choose(model.next(result.tokens), mode, rng);
    done = append_tokens(result.tokens, std::span<const TokenId>(&t, 1), limit, stop_tokens);
  }
  result.trace.tokens_emitted = result.tokens.size() - prompt.size();
  return result;
}

GenerationResult sd_generate(const LanguageModel& target, const LanguageModel& draft, std::size_t k, Lenience lenience,
                             std::span<const TokenId> prompt, std::size_t max_new_tokens, DecodeMode mode,
                             RandomSource& rng, std::span<const TokenId> stop_tokens) {
  require(!prompt.empty(), "generate needs a non-empty prompt");
  require(k >= 1, "speculative decoding needs k >= 1");
  GenerationResult result;
  result.tokens.assign(prompt.begin(), prompt.end());
  result.trace.target = target.descriptor();
  const std::size_t limit = prompt.size() + max_new_tokens;
  bool done = max_new_tokens == 0;
  while (!done) {
    ReviewOutcome outcome = sd_step(target, draft, k, lenience, result.tokens, mode, rng);
    for (std::size_t i = 0; i < k; ++i) result.trace.record_call(draft);
    result.trace.record_call(target);
    StageRecord rec;
    rec.model = target.descriptor();
    rec.proposed = k;
    rec.accepted = outcome.accepted_count;
    rec.positional_accept.assign(k, false);
    std::fill_n(rec.positional_accept.begin(), outcome.accepted_count, true);
    result.trace.steps.push_back(std::move(rec));
    done = append_tokens(result.tokens, outcome.emitted, limit, stop_tokens);
  }
  result.trace.tokens_emitted = result.tokens.size() - prompt.size();
  return result;
}

}  // namespace csd
