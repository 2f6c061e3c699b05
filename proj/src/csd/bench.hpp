#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csd/analytics.hpp"
#include "csd/cascade.hpp"
#include "csd/core.hpp"
#include "csd/remote.hpp"
#include "csd/statlm.hpp"

namespace csd {

// ---------------------------------------------------------------- corpus

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

struct Corpus {
  Vocab vocab;
  TokenSeq tokens;
};

// Tokenizes a training split and builds its vocabulary from it.
Corpus ingest_corpus(const std::string& path, TokenizerKind kind);
// Tokenizes another split with an existing vocabulary (unknowns map to UNK).
TokenSeq ingest_with_vocab(const std::string& path, const Vocab& vocab);

struct PromptSpec {
  // Each prompt is a line cut just after the first occurrence of this string;
  // lines without it are cut at max_tokens.
  std::string delimiter = " A:";
  std::size_t count = 100;
  std::size_t max_tokens = 256;
};

std::vector<TokenSeq> extract_prompts(std::string_view text, const Vocab& vocab, const PromptSpec& spec);

// ---------------------------------------------------------------- config

struct ModelSpec {
  std::string name;
  std::string type;  // ngram | bigram | mag | file | remote
  std::size_t order = 0;
  Smoothing smoothing;
  std::optional<double> cost_weight;
  std::size_t span = 10;
  MatchPolicy policy = MatchPolicy::PromptAndGeneration;
  std::string fallback;  // bigram model used by mag; trained on demand when empty
  std::string path;      // file models
  RemoteModelSpec remote;
};

struct RunSpec {
  std::string name;
  std::string method;  // autoregressive | sd | csd
  std::string target;
  std::vector<std::string> drafts;
  std::size_t k = 0;  // sd
  KMatrix k_matrix;   // csd
  double lenience = 1.0;
  DecodeMode mode = DecodeMode::Greedy;
  std::size_t max_new_tokens = 64;
  std::optional<std::uint64_t> seed;
  bool allow_inexact_sampling = false;
  std::vector<std::string> stop_pieces;
};

struct BenchConfig {
  std::string train_path;
  std::string eval_path;
  TokenizerKind tokenizer = TokenizerKind::Byte;
  PromptSpec prompts;
  std::vector<ModelSpec> models;
  std::string default_target;
  // Per-run times for the PW cost preset; empty disables it.
  std::map<std::string, double> pw_costs;
  std::vector<RunSpec> runs;
  std::optional<std::uint64_t> seed;
  bool verify_greedy = true;
  std::size_t threads = 1;
  std::string report_json;
  std::string report_csv;

  const ModelSpec* find_model(const std::string& name) const;
  // Checks references, shapes and seeds; throws ConfigError.
  void validate() const;
};

// Relative paths are resolved against base_dir.
BenchConfig parse_bench_config(const std::string& json_text, const std::string& base_dir);
BenchConfig load_bench_config(const std::string& path);

// ---------------------------------------------------------------- execution

struct ModelSet {
  Vocab vocab;
  std::map<std::string, ModelPtr> models;
  std::vector<TokenSeq> prompts;

  ModelPtr get(const std::string& name) const;
  std::map<std::string, double> ms_costs() const;
};

ModelSet build_models(const BenchConfig& config);

struct RunResult {
  RunSpec spec;
  std::uint64_t seed = 0;
  std::vector<TokenSeq> outputs;  // generated tokens only, one per prompt
  GenerationTrace trace;
  double swi_ms = 0.0;
  std::optional<double> swi_pw;
  // Fraction of outermost reviews that accepted drafted position i.
  std::vector<double> positional_acceptance;
  std::size_t outer_reviews = 0;
  std::optional<bool> greedy_equivalent;  // set for greedy runs
  double wall_seconds = 0.0;
};

struct BenchReport {
  std::size_t vocab_size = 0;
  std::size_t prompt_count = 0;
  std::uint64_t master_seed = 0;
  std::map<std::string, double> ms_costs;
  std::map<std::string, double> pw_costs;
  std::vector<RunResult> runs;

  const RunResult* find(const std::string& name) const;
  // Deterministic document: no timings.
  std::string to_json() const;
  std::string to_csv() const;
};

// Seed of run i when the run spec carries none.
std::uint64_t run_seed(std::uint64_t master_seed, std::size_t index);

// Executes one run over every prompt. Prompt j uses split(seed, j).
RunResult execute_run(const RunSpec& spec, const ModelSet& models, std::uint64_t seed);

// Greedy runs are compared token by token with target-only greedy output;
// the first mismatch throws EquivalenceError with a diff.
void check_greedy_equivalence(const RunResult& run, const std::vector<TokenSeq>& reference, const Vocab& vocab);

BenchReport run_bench(const BenchConfig& config, std::optional<std::uint64_t> master_seed = std::nullopt);
BenchReport run_bench(const BenchConfig& config, const ModelSet& models,
                      std::optional<std::uint64_t> master_seed = std::nullopt);

// ---------------------------------------------------------------- positional acceptance

struct AcceptanceCurve {
  std::size_t k = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> accepted;  // steps in which position i was accepted
  std::vector<std::size_t> reached;   // steps in which position i was reviewed

  double rate(std::size_t i) const;         // 1-based, unconditional
  double conditional(std::size_t i) const;  // given positions < i accepted
  double ci95(std::size_t i) const;
  std::vector<double> rates() const;
};

// Repeated sd_step from the prompts (cycled); a prompt's context is dropped
// once it has grown by `max_growth` tokens.
AcceptanceCurve measure_positional_acceptance(const LanguageModel& target, const LanguageModel& draft, std::size_t k,
                                              std::span<const TokenSeq> prompts, std::size_t steps, DecodeMode mode,
                                              RandomSource& rng, std::size_t max_growth = 256);

std::string curve_csv(const AcceptanceCurve& curve);              // position,accept_rate,n
std::string curve_conditional_csv(const AcceptanceCurve& curve);  // position,conditional_rate,n_reached

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;  // one-sided, H1: rho < 0
};
SpearmanResult spearman_decreasing(std::span<const double> values);

// ---------------------------------------------------------------- analysis grid

struct AnalysisRow {
  std::string policy;  // sd | vertical | horizontal
  std::string label;
  std::string params;
  SimulationSpec spec;
  double closed_form = 0.0;
  EwifEstimate simulated;
  double rel_error = 0.0;
  bool within_3ci = false;
  std::string note;
};

struct AnalysisResult {
  std::vector<AnalysisRow> rows;
  std::vector<AnalysisRow> table;  // table entries, in input order

  std::string to_csv() const;
  std::string table_text() const;
};

AnalysisResult analyze_grid(const std::string& json_text, std::optional<std::uint64_t> seed = std::nullopt);

}  // namespace csd
