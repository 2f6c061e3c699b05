#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <memory>
#include <regex>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "csd/csd.h"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct ModelDeleter {
  void operator()(csd_model* m) const { csd_model_free(m); }
};
using ModelHandle = std::unique_ptr<csd_model, ModelDeleter>;

struct CFree {
  void operator()(void* p) const { csd_free(p); }
};

int report(csd_status status) {
  std::cerr << "error: " << csd_status_name(status) << ": " << csd_last_error() << "\n";
  switch (status) {
    case CSD_ERR_CONFIG:
    case CSD_ERR_CONTRACT:
    case CSD_ERR_INVALID_ARGUMENT:
      return kExitConfig;
    default:
      return kExitRuntime;
  }
}

struct Failure {
  int code;
};

void check(csd_status status) {
  if (status != CSD_OK) throw Failure{report(status)};
}

void config_error(const std::string& message) {
  std::cerr << "error: " << message << "\n";
  throw Failure{kExitConfig};
}

ModelHandle load(const std::string& path) {
  csd_model* m = nullptr;
  check(csd_model_load(path.c_str(), &m));
  return ModelHandle(m);
}

csd_mode parse_mode(const std::string& s) {
  if (s == "greedy") return CSD_MODE_GREEDY;
  if (s == "sampling") return CSD_MODE_SAMPLING;
  config_error("unknown mode '" + s + "' (expected greedy or sampling)");
  return CSD_MODE_GREEDY;
}

// Accepts "[[2,10],[0,10]]" or "2,10;0,10".
std::vector<size_t> parse_k_matrix(const std::string& text, size_t n) {
  std::vector<size_t> values;
  static const std::regex number("[0-9]+");
  for (auto it = std::sregex_iterator(text.begin(), text.end(), number); it != std::sregex_iterator(); ++it)
    values.push_back(std::stoul(it->str()));
  if (values.size() != n * n)
    config_error("k-matrix '" + text + "' has " + std::to_string(values.size()) + " entries; " + std::to_string(n) +
                 " draft(s) need " + std::to_string(n * n));
  return values;
}

int cmd_train(const std::string& corpus, const std::string& out, const std::string& type, size_t order,
              const std::string& tokenizer, const std::string& name, double smoothing, double cost, size_t span,
              const std::string& policy) {
  csd_train_options o;
  csd_train_options_init(&o);
  o.type = type.c_str();
  o.tokenizer = tokenizer.c_str();
  o.name = name.empty() ? nullptr : name.c_str();
  o.order = order;
  o.smoothing = smoothing;
  o.cost_weight = cost;
  o.span = span;
  o.match_policy = policy.c_str();
  csd_model* m = nullptr;
  check(csd_model_train(corpus.c_str(), &o, &m));
  ModelHandle model(m);
  check(csd_model_save(model.get(), out.c_str()));
  std::cout << "trained " << csd_model_name(model.get()) << " (vocab " << csd_model_vocab_size(model.get())
            << ", cost weight " << csd_model_cost_weight(model.get()) << ") -> " << out << "\n";
  return 0;
}

struct RunArgs {
  std::string target;
  std::vector<std::string> drafts;
  std::string k_matrix;
  size_t k = 0;
  double lenience = 1.0;
  std::string mode = "greedy";
  size_t max_new = 64;
  std::string prompt;
  uint64_t seed = 0;
  std::vector<std::string> stops;
  bool allow_inexact = false;
  std::string trace_out;
};

int cmd_run(const RunArgs& a) {
  ModelHandle target = load(a.target);
  std::vector<ModelHandle> drafts;
  std::vector<const csd_model*> draft_ptrs;
  for (const auto& d : a.drafts) {
    drafts.push_back(load(d));
    draft_ptrs.push_back(drafts.back().get());
  }

  std::vector<size_t> km;
  if (!a.k_matrix.empty()) {
    km = parse_k_matrix(a.k_matrix, drafts.size());
  } else if (!drafts.empty()) {
    if (drafts.size() != 1 || a.k == 0) config_error("give --k-matrix, or --k with exactly one --draft");
    km = {a.k};
  }

  int32_t* raw = nullptr;
  size_t n = 0;
  check(csd_model_tokenize(target.get(), a.prompt.c_str(), &raw, &n));
  std::unique_ptr<int32_t, CFree> prompt(raw);
  if (n == 0) config_error("prompt is empty after tokenization");

  std::vector<int32_t> stops;
  for (const auto& s : a.stops) {
    int32_t* st = nullptr;
    size_t sn = 0;
    check(csd_model_tokenize(target.get(), s.c_str(), &st, &sn));
    std::unique_ptr<int32_t, CFree> guard(st);
    if (sn != 1) config_error("stop piece '" + s + "' is not a single token");
    stops.push_back(st[0]);
  }

  csd_generate_options o;
  csd_generate_options_init(&o);
  o.mode = parse_mode(a.mode);
  o.lenience = a.lenience;
  o.max_new_tokens = a.max_new;
  o.seed = a.seed;
  o.k_matrix = km.empty() ? nullptr : km.data();
  o.stop_tokens = stops.empty() ? nullptr : stops.data();
  o.stop_count = stops.size();
  o.allow_inexact_sampling = a.allow_inexact ? 1 : 0;

  csd_generation* g = nullptr;
  check(csd_generate(target.get(), draft_ptrs.data(), draft_ptrs.size(), &o, prompt.get(), n, &g));
  std::unique_ptr<csd_generation, void (*)(csd_generation*)> gen(g, csd_generation_free);

  const int32_t* tokens = nullptr;
  const size_t total = csd_generation_tokens(gen.get(), &tokens);
  char* text = nullptr;
  check(csd_model_detokenize(target.get(), tokens, total, &text));
  std::unique_ptr<char, CFree> text_guard(text);
  std::cout << text << "\n";

  char* trace = nullptr;
  check(csd_generation_trace_json(gen.get(), &trace));
  std::unique_ptr<char, CFree> trace_guard(trace);
  if (!a.trace_out.empty()) {
    FILE* f = std::fopen(a.trace_out.c_str(), "wb");
    if (!f) {
      std::cerr << "error: cannot write '" << a.trace_out << "'\n";
      return kExitRuntime;
    }
    std::fputs(trace, f);
    std::fclose(f);
  }
  std::cerr << "tokens: " << (total - csd_generation_prompt_length(gen.get())) << "\n";
  // Summary lines only; the full trace goes to --trace.
  const std::string t(trace);
  static const std::regex field("\"(target_calls|cost_units|tokens_emitted)\": ([0-9.e+-]+)");
  for (auto it = std::sregex_iterator(t.begin(), t.end(), field); it != std::sregex_iterator(); ++it)
    std::cerr << (*it)[1] << ": " << (*it)[2] << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speculative decoding with cascaded drafts"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(csd_version()));

  auto* train = app.add_subcommand("train", "train a statistical model from a text corpus");
  std::string t_corpus, t_out, t_type = "ngram", t_tokenizer = "byte", t_name, t_policy = "prompt+generation";
  size_t t_order = 3, t_span = 10;
  double t_smoothing = 0.0, t_cost = -1.0;
  train->add_option("--corpus", t_corpus, "training text")->required();
  train->add_option("--out", t_out, "model file to write")->required();
  train->add_option("--type", t_type, "ngram | bigram | mag")->capture_default_str();
  train->add_option("--order", t_order, "n-gram order")->capture_default_str();
  train->add_option("--tokenizer", t_tokenizer, "byte | word")->capture_default_str();
  train->add_option("--name", t_name, "model name");
  train->add_option("--smoothing", t_smoothing, "interpolation weight of each higher order");
  train->add_option("--cost-weight", t_cost, "per-call cost (default: table size, 0 for mag)");
  train->add_option("--span", t_span, "mag tokens per call")->capture_default_str();
  train->add_option("--match-policy", t_policy, "mag: prompt | prompt+generation")->capture_default_str();

  auto* run = app.add_subcommand("run", "generate from one prompt");
  RunArgs ra;
  run->add_option("--target", ra.target, "target model file")->required();
  run->add_option("--draft", ra.drafts, "draft model files, largest first");
  run->add_option("--k-matrix", ra.k_matrix, "draft budgets, e.g. [[2,10],[0,10]]");
  run->add_option("--k", ra.k, "budget for a single draft");
  run->add_option("--lenience", ra.lenience, "internal review lenience")->capture_default_str();
  run->add_option("--mode", ra.mode, "greedy | sampling")->capture_default_str();
  run->add_option("--max-new", ra.max_new, "tokens to generate")->capture_default_str();
  run->add_option("--prompt", ra.prompt, "prompt text")->required();
  run->add_option("--seed", ra.seed, "random seed")->required();
  run->add_option("--stop", ra.stops, "stop pieces");
  run->add_flag("--allow-inexact-sampling", ra.allow_inexact, "permit lenience > 1 in sampling mode");
  run->add_option("--trace", ra.trace_out, "write the generation trace as JSON");

  auto* bench = app.add_subcommand("bench", "run every run spec of a bench config");
  std::string b_config, b_out, b_csv;
  uint64_t b_seed = 0;
  bench->add_option("--config", b_config, "bench config JSON")->required();
  bench->add_option("--seed", b_seed, "master seed")->required();
  bench->add_option("--out", b_out, "report JSON path");
  bench->add_option("--csv", b_csv, "report CSV path");

  auto* analyze = app.add_subcommand("analyze", "closed-form vs simulated walltime improvement");
  std::string a_grid, a_out;
  uint64_t a_seed = 0;
  auto* a_seed_opt = analyze->add_option("--seed", a_seed, "simulation seed (default: from the grid)");
  analyze->add_option("--grid", a_grid, "parameter grid JSON")->required();
  analyze->add_option("--out", a_out, "CSV path");

  auto* curve = app.add_subcommand("accept-curve", "per-position acceptance rates");
  std::string c_target, c_draft, c_prompts, c_out, c_mode = "greedy", c_delim = " A:";
  size_t c_k = 30, c_steps = 20000, c_max_prompts = 100;
  uint64_t c_seed = 0;
  curve->add_option("--target", c_target, "target model file")->required();
  curve->add_option("--draft", c_draft, "draft model file")->required();
  curve->add_option("--k", c_k, "draft tokens per step")->capture_default_str();
  curve->add_option("--steps", c_steps, "speculative steps")->capture_default_str();
  curve->add_option("--prompts", c_prompts, "prompt file, one per line")->required();
  curve->add_option("--delimiter", c_delim, "prompt cut marker")->capture_default_str();
  curve->add_option("--max-prompts", c_max_prompts, "prompts to cycle through")->capture_default_str();
  curve->add_option("--mode", c_mode, "greedy | sampling")->capture_default_str();
  curve->add_option("--seed", c_seed, "random seed")->capture_default_str();
  curve->add_option("--out", c_out, "CSV path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_exit_code() != 0) std::cerr << app.help();
    return kExitConfig;
  }

  try {
    if (*train)
      return cmd_train(t_corpus, t_out, t_type, t_order, t_tokenizer, t_name, t_smoothing, t_cost, t_span, t_policy);
    if (*run) return cmd_run(ra);
    if (*bench) {
      char* summary = nullptr;
      check(csd_bench_run(b_config.c_str(), 1, b_seed, b_out.c_str(), b_csv.c_str(), &summary));
      std::unique_ptr<char, CFree> guard(summary);
      std::cout << summary;
      return 0;
    }
    if (*analyze) {
      char* table = nullptr;
      check(csd_analyze(a_grid.c_str(), a_seed_opt->count() > 0 ? 1 : 0, a_seed, a_out.c_str(), &table));
      std::unique_ptr<char, CFree> guard(table);
      std::cout << table;
      return 0;
    }
    if (*curve) {
      ModelHandle target = load(c_target);
      ModelHandle draft = load(c_draft);
      csd_accept_options o;
      csd_accept_options_init(&o);
      o.k = c_k;
      o.steps = c_steps;
      o.mode = parse_mode(c_mode);
      o.seed = c_seed;
      o.prompts_path = c_prompts.c_str();
      o.delimiter = c_delim.c_str();
      o.max_prompts = c_max_prompts;
      o.csv_out = c_out.empty() ? nullptr : c_out.c_str();
      char* csv = nullptr;
      check(csd_accept_curve(target.get(), draft.get(), &o, &csv));
      std::unique_ptr<char, CFree> guard(csv);
      if (c_out.empty()) std::cout << csv;
      return 0;
    }
  } catch (const Failure& f) {
    return f.code;
  }
  return kExitConfig;
}
