#include "csd/csd.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "csd/bench.hpp"
#include "json.hpp"

struct csd_model {
  csd::ModelPtr model;
  std::string name;
};

struct csd_generation {
  csd::GenerationResult result;
  std::size_t prompt_length = 0;
};

namespace {

thread_local std::string g_last_error;

csd_status fail(csd_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

csd_status status_of(csd::ErrorCode code) {
  switch (code) {
    case csd::ErrorCode::ContractViolation: return CSD_ERR_CONTRACT;
    case csd::ErrorCode::DegenerateDistribution: return CSD_ERR_DEGENERATE;
    case csd::ErrorCode::Config: return CSD_ERR_CONFIG;
    case csd::ErrorCode::Io: return CSD_ERR_IO;
    case csd::ErrorCode::Training: return CSD_ERR_TRAINING;
    case csd::ErrorCode::Construction: return CSD_ERR_CONSTRUCTION;
    case csd::ErrorCode::RemoteUnavailable: return CSD_ERR_REMOTE_UNAVAILABLE;
    case csd::ErrorCode::Protocol: return CSD_ERR_PROTOCOL;
    case csd::ErrorCode::Equivalence: return CSD_ERR_EQUIVALENCE;
    case csd::ErrorCode::Internal: return CSD_ERR_INTERNAL;
  }
  return CSD_ERR_INTERNAL;
}

template <typename F>
csd_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return CSD_OK;
  } catch (const csd::Error& e) {
    return fail(status_of(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(CSD_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(CSD_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(CSD_ERR_INTERNAL, "unknown error");
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size());
  out[s.size()] = '\0';
  return out;
}

csd_model* wrap(csd::ModelPtr model) {
  auto* m = new csd_model;
  m->name = model->descriptor();
  m->model = std::move(model);
  return m;
}

#define CSD_CHECK_ARG(cond, what)                                 \
  do {                                                            \
    if (!(cond)) return fail(CSD_ERR_INVALID_ARGUMENT, (what));   \
  } while (0)

std::string or_default(const char* s, const char* fallback) { return s && *s ? s : fallback; }

nlohmann::json trace_json(const csd::GenerationTrace& t) {
  nlohmann::json j;
  j["target"] = t.target;
  j["tokens_emitted"] = t.tokens_emitted;
  j["target_calls"] = t.target_calls();
  j["calls_per_model"] = t.calls_per_model;
  j["cost_weights"] = t.cost_weights;
  j["cost_units"] = t.cost_units;
  j["warnings"] = t.warnings;
  j["steps"] = nlohmann::json::array();
  for (const auto& s : t.steps) {
    std::string bits;
    for (bool b : s.positional_accept) bits += b ? '1' : '0';
    j["steps"].push_back({{"level", s.level},
                          {"stage", s.stage},
                          {"model", s.model},
                          {"proposed", s.proposed},
                          {"accepted", s.accepted},
                          {"positional_accept", bits}});
  }
  return j;
}

}  // namespace

extern "C" {

const char* csd_version(void) { return "1.0.0"; }

const char* csd_last_error(void) { return g_last_error.c_str(); }

const char* csd_status_name(csd_status status) {
  switch (status) {
    case CSD_OK: return "ok";
    case CSD_ERR_CONTRACT: return "contract violation";
    case CSD_ERR_DEGENERATE: return "degenerate distribution";
    case CSD_ERR_CONFIG: return "configuration error";
    case CSD_ERR_IO: return "i/o error";
    case CSD_ERR_TRAINING: return "training error";
    case CSD_ERR_CONSTRUCTION: return "construction error";
    case CSD_ERR_REMOTE_UNAVAILABLE: return "remote unavailable";
    case CSD_ERR_PROTOCOL: return "protocol error";
    case CSD_ERR_EQUIVALENCE: return "greedy equivalence failure";
    case CSD_ERR_INTERNAL: return "internal error";
    case CSD_ERR_INVALID_ARGUMENT: return "invalid argument";
  }
  return "unknown status";
}

void csd_free(void* ptr) { std::free(ptr); }

void csd_train_options_init(csd_train_options* o) {
  if (!o) return;
  *o = csd_train_options{};
  o->type = "ngram";
  o->tokenizer = "byte";
  o->order = 3;
  o->smoothing = 0.0;
  o->cost_weight = -1.0;
  o->span = 10;
  o->match_policy = "prompt+generation";
}

csd_status csd_model_train(const char* corpus_path, const csd_train_options* options, csd_model** out) {
  CSD_CHECK_ARG(corpus_path && out, "corpus_path and out are required");
  csd_train_options o;
  csd_train_options_init(&o);
  if (options) o = *options;
  return guarded([&] {
    const std::string type = or_default(o.type, "ngram");
    const auto kind = csd::tokenizer_from_string(or_default(o.tokenizer, "byte"));
    if (kind == csd::TokenizerKind::Opaque) throw csd::ConfigError("text corpora need a byte or word tokenizer");
    const csd::Corpus corpus = csd::ingest_corpus(corpus_path, kind);
    std::optional<double> cost;
    if (o.cost_weight >= 0.0) cost = o.cost_weight;
    csd::ModelPtr model;
    if (type == "ngram") {
      if (o.order < 1) throw csd::ConfigError("ngram order must be >= 1");
      csd::Smoothing s;
      if (o.smoothing > 0.0) s.default_weight = o.smoothing;
      const std::string name = or_default(o.name, ("ngram" + std::to_string(o.order)).c_str());
      csd::NGramModel g = csd::train_ngram(name, corpus.vocab, corpus.tokens, o.order, s);
      if (cost) g = csd::NGramModel(name, corpus.vocab, o.order, s, g.tables(), *cost);
      model = std::make_shared<csd::NGramModel>(std::move(g));
    } else if (type == "bigram") {
      const std::string name = or_default(o.name, "bigram");
      csd::BigramTable b = csd::train_bigram(name, corpus.vocab, corpus.tokens);
      model = cost ? std::make_shared<csd::BigramTable>(name, corpus.vocab, b.rows(), *cost)
                   : std::make_shared<csd::BigramTable>(std::move(b));
    } else if (type == "mag") {
      if (o.span < 1) throw csd::ConfigError("mag span must be >= 1");
      const std::string name = or_default(o.name, "mag");
      auto fb = std::make_shared<csd::BigramTable>(csd::train_bigram(name + "/bigram", corpus.vocab, corpus.tokens));
      model = std::make_shared<csd::MagModel>(name, fb, o.span,
                                              csd::match_policy_from_string(or_default(o.match_policy, "prompt+generation")),
                                              cost.value_or(0.0));
    } else {
      throw csd::ConfigError("unknown model type '" + type + "'");
    }
    *out = wrap(std::move(model));
  });
}

csd_status csd_model_load(const char* path, csd_model** out) {
  CSD_CHECK_ARG(path && out, "path and out are required");
  return guarded([&] { *out = wrap(csd::load_model(path)); });
}

csd_status csd_model_from_json(const char* json, csd_model** out) {
  CSD_CHECK_ARG(json && out, "json and out are required");
  return guarded([&] { *out = wrap(csd::model_from_json(json)); });
}

csd_status csd_model_connect(const char* base_url, size_t vocab_size, double cost_weight, int timeout_ms, int retries,
                             const char* name, csd_model** out) {
  CSD_CHECK_ARG(base_url && out, "base_url and out are required");
  return guarded([&] {
    csd::RemoteModelSpec spec;
    spec.base_url = base_url;
    spec.vocab_size = vocab_size;
    spec.cost_weight = cost_weight;
    if (timeout_ms > 0) spec.timeout = std::chrono::milliseconds(timeout_ms);
    spec.retries = retries;
    if (name) spec.name = name;
    *out = wrap(csd::RemoteModel::connect(spec));
  });
}

csd_status csd_model_save(const csd_model* model, const char* path) {
  CSD_CHECK_ARG(model && path, "model and path are required");
  return guarded([&] { csd::save_model(*model->model, path); });
}

void csd_model_free(csd_model* model) { delete model; }

size_t csd_model_vocab_size(const csd_model* model) { return model ? model->model->vocab().size() : 0; }

const char* csd_model_name(const csd_model* model) { return model ? model->name.c_str() : ""; }

double csd_model_cost_weight(const csd_model* model) { return model ? model->model->cost_weight() : 0.0; }

csd_status csd_model_tokenize(const csd_model* model, const char* text, int32_t** tokens, size_t* count) {
  CSD_CHECK_ARG(model && text && tokens && count, "model, text, tokens and count are required");
  return guarded([&] {
    const csd::TokenSeq t = model->model->vocab().tokenize(text);
    auto* buf = static_cast<int32_t*>(std::malloc(std::max<std::size_t>(1, t.size()) * sizeof(int32_t)));
    if (!buf) throw std::bad_alloc();
    std::copy(t.begin(), t.end(), buf);
    *tokens = buf;
    *count = t.size();
  });
}

csd_status csd_model_detokenize(const csd_model* model, const int32_t* tokens, size_t count, char** text) {
  CSD_CHECK_ARG(model && text && (tokens || count == 0), "model, tokens and text are required");
  return guarded([&] { *text = copy_string(model->model->vocab().detokenize(std::span<const int32_t>(tokens, count))); });
}

csd_status csd_model_evaluate(const csd_model* model, const int32_t* tokens, size_t count, size_t start, double* out,
                              size_t out_len) {
  CSD_CHECK_ARG(model && out && (tokens || count == 0), "model, tokens and out are required");
  if (start >= 1 && start <= count + 1)
    CSD_CHECK_ARG(out_len >= (count - start + 2) * model->model->vocab().size(), "output buffer is too small");
  return guarded([&] {
    const auto dists = model->model->evaluate(std::span<const int32_t>(tokens, count), start);
    const std::size_t v = model->model->vocab().size();
    for (std::size_t r = 0; r < dists.size(); ++r) std::copy(dists[r].probs().begin(), dists[r].probs().end(), out + r * v);
  });
}

void csd_generate_options_init(csd_generate_options* o) {
  if (!o) return;
  *o = csd_generate_options{};
  o->mode = CSD_MODE_GREEDY;
  o->lenience = 1.0;
  o->max_new_tokens = 64;
}

csd_status csd_generate(const csd_model* target, const csd_model* const* drafts, size_t draft_count,
                        const csd_generate_options* options, const int32_t* prompt, size_t prompt_len,
                        csd_generation** out) {
  CSD_CHECK_ARG(target && options && prompt && out, "target, options, prompt and out are required");
  CSD_CHECK_ARG(draft_count == 0 || drafts, "drafts array is required when draft_count > 0");
  CSD_CHECK_ARG(draft_count == 0 || options->k_matrix, "k_matrix is required when drafts are given");
  return guarded([&] {
    csd::CascadeConfig c;
    c.target = target->model;
    std::vector<std::vector<std::size_t>> rows(draft_count, std::vector<std::size_t>(draft_count));
    for (std::size_t i = 0; i < draft_count; ++i) {
      if (!drafts[i]) throw csd::ContractViolation("null draft model");
      c.drafts.push_back(drafts[i]->model);
      for (std::size_t j = 0; j < draft_count; ++j) rows[i][j] = options->k_matrix[i * draft_count + j];
    }
    c.k_matrix = csd::KMatrix(std::move(rows));
    c.lenience = csd::Lenience(options->lenience);
    c.mode = options->mode == CSD_MODE_SAMPLING ? csd::DecodeMode::Sampling : csd::DecodeMode::Greedy;
    c.max_new_tokens = options->max_new_tokens;
    c.seed = options->seed;
    c.allow_inexact_sampling = options->allow_inexact_sampling != 0;
    if (options->stop_count) c.stop_tokens.assign(options->stop_tokens, options->stop_tokens + options->stop_count);
    auto gen = std::make_unique<csd_generation>();
    gen->result = csd::generate(c, std::span<const int32_t>(prompt, prompt_len));
    gen->prompt_length = prompt_len;
    *out = gen.release();
  });
}

size_t csd_generation_tokens(const csd_generation* gen, const int32_t** tokens) {
  if (!gen) return 0;
  if (tokens) *tokens = gen->result.tokens.data();
  return gen->result.tokens.size();
}

size_t csd_generation_prompt_length(const csd_generation* gen) { return gen ? gen->prompt_length : 0; }

csd_status csd_generation_trace_json(const csd_generation* gen, char** json) {
  CSD_CHECK_ARG(gen && json, "generation and json are required");
  return guarded([&] { *json = copy_string(trace_json(gen->result.trace).dump(2)); });
}

void csd_generation_free(csd_generation* gen) { delete gen; }

csd_status csd_bench_run(const char* config_path, int has_seed, uint64_t seed, const char* json_out,
                         const char* csv_out, char** summary) {
  CSD_CHECK_ARG(config_path, "config_path is required");
  return guarded([&] {
    const csd::BenchConfig config = csd::load_bench_config(config_path);
    const csd::BenchReport report =
        csd::run_bench(config, has_seed ? std::optional<std::uint64_t>(seed) : std::nullopt);
    const std::string jpath = json_out && *json_out ? json_out : config.report_json;
    const std::string cpath = csv_out && *csv_out ? csv_out : config.report_csv;
    const std::string csv = report.to_csv();
    if (!jpath.empty()) csd::write_text_file(jpath, report.to_json());
    if (!cpath.empty()) csd::write_text_file(cpath, csv);
    if (summary) *summary = copy_string(csv);
  });
}

csd_status csd_analyze(const char* grid_path, int has_seed, uint64_t seed, const char* csv_out, char** table) {
  CSD_CHECK_ARG(grid_path, "grid_path is required");
  return guarded([&] {
    const csd::AnalysisResult r = csd::analyze_grid(csd::read_text_file(grid_path),
                                                    has_seed ? std::optional<std::uint64_t>(seed) : std::nullopt);
    if (csv_out && *csv_out) csd::write_text_file(csv_out, r.to_csv());
    if (table) *table = copy_string(r.table_text());
  });
}

void csd_accept_options_init(csd_accept_options* o) {
  if (!o) return;
  *o = csd_accept_options{};
  o->k = 30;
  o->steps = 20000;
  o->mode = CSD_MODE_GREEDY;
  o->delimiter = " A:";
  o->max_prompts = 100;
}

csd_status csd_accept_curve(const csd_model* target, const csd_model* draft, const csd_accept_options* options,
                            char** csv) {
  CSD_CHECK_ARG(target && draft && options, "target, draft and options are required");
  CSD_CHECK_ARG(options->prompts_path, "prompts_path is required");
  return guarded([&] {
    csd::PromptSpec ps;
    ps.delimiter = options->delimiter ? options->delimiter : "";
    if (options->max_prompts) ps.count = options->max_prompts;
    const auto prompts = csd::extract_prompts(csd::read_text_file(options->prompts_path), target->model->vocab(), ps);
    if (prompts.empty()) throw csd::ConfigError(std::string("no prompts in '") + options->prompts_path + "'");
    csd::RandomSource rng(options->seed);
    const auto mode = options->mode == CSD_MODE_SAMPLING ? csd::DecodeMode::Sampling : csd::DecodeMode::Greedy;
    const auto curve = csd::measure_positional_acceptance(*target->model, *draft->model, options->k, prompts,
                                                          options->steps, mode, rng);
    const std::string text = csd::curve_csv(curve);
    if (options->csv_out && *options->csv_out) {
      csd::write_text_file(options->csv_out, text);
      csd::write_text_file(std::string(options->csv_out) + ".conditional.csv", csd::curve_conditional_csv(curve));
    }
    if (csv) *csv = copy_string(text);
  });
}

}  // extern "C"
