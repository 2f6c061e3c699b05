#include "csd/bench.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"

namespace csd {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) return std::to_string(v);
  return std::string(buf, end);
}

std::string resolve(const std::string& base_dir, const std::string& path) {
  if (path.empty() || base_dir.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

}  // namespace

// ---------------------------------------------------------------- corpus

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error while reading '" + path + "'");
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("error while writing '" + path + "'");
}

Corpus ingest_corpus(const std::string& path, TokenizerKind kind) {
  const std::string text = read_text_file(path);
  Corpus c;
  c.vocab = Vocab::build(kind, text);
  c.tokens = c.vocab.tokenize(text);
  return c;
}

TokenSeq ingest_with_vocab(const std::string& path, const Vocab& vocab) { return vocab.tokenize(read_text_file(path)); }

std::vector<TokenSeq> extract_prompts(std::string_view text, const Vocab& vocab, const PromptSpec& spec) {
  std::vector<TokenSeq> prompts;
  std::size_t pos = 0;
  while (pos < text.size() && prompts.size() < spec.count) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    if (!spec.delimiter.empty()) {
      const std::size_t cut = line.find(spec.delimiter);
      if (cut != std::string_view::npos) line = line.substr(0, cut + spec.delimiter.size());
    }
    TokenSeq t = vocab.tokenize(line);
    if (t.size() > spec.max_tokens) t.resize(spec.max_tokens);
    if (!t.empty()) prompts.push_back(std::move(t));
  }
  return prompts;
}

// ---------------------------------------------------------------- config

const ModelSpec* BenchConfig::find_model(const std::string& name) const {
  for (const auto& m : models)
    if (m.name == name) return &m;
  return nullptr;
}

namespace {

std::set<std::string> models_of(const RunSpec& r) {
  std::set<std::string> s(r.drafts.begin(), r.drafts.end());
  s.insert(r.target);
  return s;
}

}  // namespace

void BenchConfig::validate() const {
  if (train_path.empty()) throw ConfigError("bench config needs corpus.train");
  if (eval_path.empty()) throw ConfigError("bench config needs corpus.eval");
  if (prompts.count == 0) throw ConfigError("prompts.count must be >= 1");
  if (runs.empty()) throw ConfigError("bench config has no runs");
  if (threads == 0) throw ConfigError("threads must be >= 1");

  std::set<std::string> names;
  for (const auto& m : models) {
    if (m.name.empty()) throw ConfigError("model spec without a name");
    if (!names.insert(m.name).second) throw ConfigError("model '" + m.name + "' defined twice");
    if (m.type == "ngram") {
      if (m.order < 1) throw ConfigError("model '" + m.name + "': ngram order must be >= 1");
    } else if (m.type == "mag") {
      if (m.span < 1) throw ConfigError("model '" + m.name + "': mag span must be >= 1");
      if (!m.fallback.empty()) {
        const ModelSpec* fb = find_model(m.fallback);
        if (!fb || fb->type != "bigram")
          throw ConfigError("model '" + m.name + "': fallback '" + m.fallback + "' is not a bigram model");
      }
    } else if (m.type == "file") {
      if (m.path.empty()) throw ConfigError("model '" + m.name + "': file models need a path");
    } else if (m.type == "remote") {
      if (m.remote.base_url.empty()) throw ConfigError("model '" + m.name + "': remote models need a url");
    } else if (m.type != "bigram") {
      throw ConfigError("model '" + m.name + "': unknown type '" + m.type + "'");
    }
    if (m.cost_weight && *m.cost_weight < 0.0) throw ConfigError("model '" + m.name + "': cost_weight must be >= 0");
  }

  std::set<std::string> run_names;
  for (const auto& r : runs) {
    const std::string where = "run '" + r.name + "'";
    if (r.name.empty()) throw ConfigError("run spec without a name");
    if (!run_names.insert(r.name).second) throw ConfigError(where + " defined twice");
    if (r.target.empty()) throw ConfigError(where + " has no target and the config sets no default");
    for (const auto& m : models_of(r))
      if (!find_model(m)) throw ConfigError(where + " references undefined model '" + m + "'");
    if (r.lenience < 1.0) throw ConfigError(where + ": lenience must be >= 1");
    if (r.method == "autoregressive") {
      if (!r.drafts.empty()) throw ConfigError(where + ": autoregressive runs take no drafts");
    } else if (r.method == "sd") {
      if (r.drafts.size() != 1) throw ConfigError(where + ": sd runs take exactly one draft");
      if (r.k < 1) throw ConfigError(where + ": sd runs need k >= 1");
    } else if (r.method == "csd") {
      if (r.drafts.empty()) throw ConfigError(where + ": csd runs need at least one draft");
      if (r.k_matrix.size() != r.drafts.size())
        throw ConfigError(where + ": k_matrix is " + std::to_string(r.k_matrix.size()) + "x" +
                          std::to_string(r.k_matrix.size()) + " for " + std::to_string(r.drafts.size()) + " drafts");
      const auto row = r.k_matrix.first_row();
      if (std::all_of(row.begin(), row.end(), [](std::size_t k) { return k == 0; }))
        throw ConfigError(where + ": the first k_matrix row has no non-zero budget");
    } else {
      throw ConfigError(where + ": unknown method '" + r.method + "'");
    }
    if (r.mode == DecodeMode::Sampling && r.lenience > 1.0 && r.method == "csd" && !r.allow_inexact_sampling)
      throw ConfigError(where + ": internal lenience > 1 in sampling mode needs allow_inexact_sampling");
    if (!pw_costs.empty())
      for (const auto& m : models_of(r))
        if (!pw_costs.count(m)) throw ConfigError(where + ": model '" + m + "' has no pw_costs entry");
  }
  for (const auto& [m, c] : pw_costs) {
    if (!find_model(m)) throw ConfigError("pw_costs names undefined model '" + m + "'");
    if (!(c >= 0.0)) throw ConfigError("pw_costs['" + m + "'] must be >= 0");
  }
}

namespace {

Smoothing parse_smoothing(const json& j) {
  Smoothing s;
  if (j.is_number()) {
    s.default_weight = j.get<double>();
    return s;
  }
  s.weights = j.value("weights", std::vector<double>{});
  s.default_weight = j.value("default_weight", s.default_weight);
  s.uniform_weight = j.value("uniform_weight", s.uniform_weight);
  return s;
}

ModelSpec parse_model_spec(const json& j, const std::string& base_dir) {
  ModelSpec m;
  m.name = j.at("name").get<std::string>();
  m.type = j.value("type", std::string(j.contains("path") ? "file" : "ngram"));
  m.order = j.value("order", std::size_t{0});
  if (j.contains("smoothing")) m.smoothing = parse_smoothing(j["smoothing"]);
  if (j.contains("cost_weight")) m.cost_weight = j["cost_weight"].get<double>();
  m.span = j.value("span", std::size_t{10});
  m.policy = match_policy_from_string(j.value("match_policy", std::string("prompt+generation")));
  m.fallback = j.value("fallback", std::string());
  m.path = resolve(base_dir, j.value("path", std::string()));
  if (m.type == "remote") {
    m.remote.base_url = j.at("url").get<std::string>();
    m.remote.vocab_size = j.at("vocab_size").get<std::size_t>();
    m.remote.cost_weight = m.cost_weight.value_or(1.0);
    m.remote.timeout = std::chrono::milliseconds(j.value("timeout_ms", 10000));
    m.remote.retries = j.value("retries", 2);
    m.remote.name = m.name;
  }
  return m;
}

RunSpec parse_run_spec(const json& j, const std::string& default_target) {
  RunSpec r;
  r.name = j.at("name").get<std::string>();
  r.method = j.at("method").get<std::string>();
  if (r.method == "ar") r.method = "autoregressive";
  r.target = j.value("target", default_target);
  r.drafts = j.value("drafts", std::vector<std::string>{});
  r.k = j.value("k", std::size_t{0});
  if (j.contains("k_matrix")) r.k_matrix = KMatrix(j["k_matrix"].get<std::vector<std::vector<std::size_t>>>());
  r.lenience = j.value("lenience", 1.0);
  r.mode = decode_mode_from_string(j.value("mode", std::string("greedy")));
  r.max_new_tokens = j.value("max_new_tokens", std::size_t{64});
  if (j.contains("seed")) r.seed = j["seed"].get<std::uint64_t>();
  r.allow_inexact_sampling = j.value("allow_inexact_sampling", false);
  r.stop_pieces = j.value("stop", std::vector<std::string>{});
  return r;
}

}  // namespace

BenchConfig parse_bench_config(const std::string& json_text, const std::string& base_dir) {
  BenchConfig c;
  try {
    const json j = json::parse(json_text);
    const json& corpus = j.at("corpus");
    c.train_path = resolve(base_dir, corpus.at("train").get<std::string>());
    c.eval_path = resolve(base_dir, corpus.at("eval").get<std::string>());
    c.tokenizer = tokenizer_from_string(corpus.value("tokenizer", std::string("byte")));
    if (j.contains("prompts")) {
      const json& p = j["prompts"];
      c.prompts.count = p.value("count", c.prompts.count);
      c.prompts.delimiter = p.value("delimiter", c.prompts.delimiter);
      c.prompts.max_tokens = p.value("max_tokens", c.prompts.max_tokens);
    }
    for (const auto& m : j.at("models")) c.models.push_back(parse_model_spec(m, base_dir));
    c.default_target = j.value("target", std::string());
    c.pw_costs = j.value("pw_costs", std::map<std::string, double>{});
    for (const auto& r : j.at("runs")) c.runs.push_back(parse_run_spec(r, c.default_target));
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    c.verify_greedy = j.value("verify_greedy", true);
    c.threads = j.value("threads", std::size_t{1});
    if (j.contains("report")) {
      c.report_json = resolve(base_dir, j["report"].value("json", std::string()));
      c.report_csv = resolve(base_dir, j["report"].value("csv", std::string()));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bench config: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("bench config: ") + e.what());
  }
  c.validate();
  return c;
}

BenchConfig load_bench_config(const std::string& path) {
  const std::string text = read_text_file(path);
  return parse_bench_config(text, fs::path(path).parent_path().string());
}

// ---------------------------------------------------------------- models

ModelPtr ModelSet::get(const std::string& name) const {
  auto it = models.find(name);
  if (it == models.end()) throw ConfigError("undefined model '" + name + "'");
  return it->second;
}

std::map<std::string, double> ModelSet::ms_costs() const {
  std::map<std::string, double> out;
  for (const auto& [name, m] : models) out[name] = m->cost_weight();
  return out;
}

ModelSet build_models(const BenchConfig& config) {
  config.validate();
  ModelSet set;
  Corpus train = ingest_corpus(config.train_path, config.tokenizer);
  set.vocab = train.vocab;
  set.prompts = extract_prompts(read_text_file(config.eval_path), set.vocab, config.prompts);
  if (set.prompts.empty()) throw ConfigError("no prompts could be extracted from '" + config.eval_path + "'");

  std::map<std::string, std::shared_ptr<const BigramTable>> bigrams;
  auto bigram_for = [&](const std::string& name, std::optional<double> cost) {
    auto it = bigrams.find(name);
    if (it != bigrams.end()) return it->second;
    auto b = std::make_shared<BigramTable>(train_bigram(name, set.vocab, train.tokens));
    if (cost) b = std::make_shared<BigramTable>(name, set.vocab, b->rows(), *cost);
    bigrams.emplace(name, b);
    return std::shared_ptr<const BigramTable>(b);
  };

  for (const auto& m : config.models) {
    if (m.type != "bigram") continue;
    set.models[m.name] = bigram_for(m.name, m.cost_weight);
  }
  for (const auto& m : config.models) {
    ModelPtr model;
    if (m.type == "ngram") {
      NGramModel g = train_ngram(m.name, set.vocab, train.tokens, m.order, m.smoothing);
      if (m.cost_weight) g = NGramModel(m.name, set.vocab, m.order, m.smoothing, g.tables(), *m.cost_weight);
      model = std::make_shared<NGramModel>(std::move(g));
    } else if (m.type == "mag") {
      auto fb = bigram_for(m.fallback.empty() ? m.name + "/bigram" : m.fallback, std::nullopt);
      model = std::make_shared<MagModel>(m.name, fb, m.span, m.policy, m.cost_weight.value_or(0.0));
    } else if (m.type == "file") {
      auto loaded = load_model(m.path);
      if (loaded->vocab().kind() != TokenizerKind::Opaque && !(loaded->vocab() == set.vocab))
        throw ConfigError("model file '" + m.path + "' was trained with a different vocabulary than the corpus");
      model = std::make_shared<AliasModel>(loaded, m.name, m.cost_weight.value_or(loaded->cost_weight()));
    } else if (m.type == "remote") {
      model = RemoteModel::connect(m.remote);
    } else {
      continue;
    }
    set.models[m.name] = model;
  }
  return set;
}

// ---------------------------------------------------------------- runs

std::uint64_t run_seed(std::uint64_t master_seed, std::size_t index) { return RandomSource::split(master_seed, index); }

namespace {

std::vector<TokenId> stop_tokens(const RunSpec& spec, const Vocab& vocab) {
  std::vector<TokenId> out;
  for (const auto& piece : spec.stop_pieces) {
    auto id = vocab.id_of(piece);
    if (!id) throw ConfigError("run '" + spec.name + "': stop piece '" + piece + "' is not in the vocabulary");
    out.push_back(*id);
  }
  return out;
}

std::vector<double> outer_positional_rates(const GenerationTrace& trace, std::size_t& reviews) {
  std::vector<std::size_t> hits;
  reviews = 0;
  for (const auto& s : trace.steps) {
    if (s.level != 0) continue;
    ++reviews;
    if (hits.size() < s.positional_accept.size()) hits.resize(s.positional_accept.size(), 0);
    for (std::size_t i = 0; i < s.positional_accept.size(); ++i) hits[i] += s.positional_accept[i] ? 1 : 0;
  }
  std::vector<double> rates;
  for (std::size_t h : hits) rates.push_back(reviews ? static_cast<double>(h) / static_cast<double>(reviews) : 0.0);
  return rates;
}

}  // namespace

RunResult execute_run(const RunSpec& spec, const ModelSet& models, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult result;
  result.spec = spec;
  result.seed = seed;
  const ModelPtr target = models.get(spec.target);
  std::vector<ModelPtr> drafts;
  for (const auto& d : spec.drafts) drafts.push_back(models.get(d));
  const auto stops = stop_tokens(spec, models.vocab);
  result.trace.target = target->descriptor();

  for (std::size_t j = 0; j < models.prompts.size(); ++j) {
    const TokenSeq& prompt = models.prompts[j];
    const std::uint64_t prompt_seed = RandomSource::split(seed, j);
    GenerationResult g;
    if (spec.method == "autoregressive") {
      RandomSource rng(prompt_seed);
      g = autoregressive_generate(*target->bind_prompt(prompt), prompt, spec.max_new_tokens, spec.mode, rng, stops);
    } else if (spec.method == "sd") {
      RandomSource rng(prompt_seed);
      g = sd_generate(*target->bind_prompt(prompt), *drafts.front()->bind_prompt(prompt), spec.k,
                      Lenience(spec.lenience), prompt, spec.max_new_tokens, spec.mode, rng, stops);
    } else {
      CascadeConfig c;
      c.target = target;
      c.drafts = drafts;
      c.k_matrix = spec.k_matrix;
      c.lenience = Lenience(spec.lenience);
      c.mode = spec.mode;
      c.max_new_tokens = spec.max_new_tokens;
      c.stop_tokens = stops;
      c.seed = prompt_seed;
      c.allow_inexact_sampling = spec.allow_inexact_sampling;
      g = generate(c, prompt);
    }
    result.outputs.emplace_back(g.tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()), g.tokens.end());
    result.trace.merge(g.trace);
  }
  result.positional_acceptance = outer_positional_rates(result.trace, result.outer_reviews);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

void check_greedy_equivalence(const RunResult& run, const std::vector<TokenSeq>& reference, const Vocab& vocab) {
  if (run.outputs.size() != reference.size())
    throw EquivalenceError("run '" + run.spec.name + "' produced " + std::to_string(run.outputs.size()) +
                           " outputs for " + std::to_string(reference.size()) + " prompts");
  for (std::size_t j = 0; j < reference.size(); ++j) {
    const TokenSeq& got = run.outputs[j];
    const TokenSeq& want = reference[j];
    if (got == want) continue;
    const auto [gi, wi] = std::mismatch(got.begin(), got.end(), want.begin(), want.end());
    const std::size_t at = static_cast<std::size_t>(gi - got.begin());
    auto show = [&](const TokenSeq& t) {
      const std::size_t from = at >= 8 ? at - 8 : 0;
      const std::size_t to = std::min(t.size(), at + 8);
      std::ostringstream ss;
      ss << '"' << vocab.detokenize(std::span<const TokenId>(t).subspan(from, to - from)) << "\" (ids";
      for (std::size_t i = from; i < to; ++i) ss << ' ' << t[i];
      ss << ')';
      return ss.str();
    };
    throw EquivalenceError("greedy run '" + run.spec.name + "' diverges from target-only greedy output on prompt " +
                           std::to_string(j) + " at generated token " + std::to_string(at) + "\n  expected: " +
                           show(want) + "\n  got:      " + show(got));
  }
}

BenchReport run_bench(const BenchConfig& config, std::optional<std::uint64_t> master_seed) {
  const ModelSet models = build_models(config);
  return run_bench(config, models, master_seed);
}

BenchReport run_bench(const BenchConfig& config, const ModelSet& models, std::optional<std::uint64_t> master_seed) {
  config.validate();
  const std::optional<std::uint64_t> master = master_seed ? master_seed : config.seed;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < config.runs.size(); ++i) {
    const auto& r = config.runs[i];
    if (!r.seed && !master)
      throw ConfigError("run '" + r.name + "' has no seed and no master seed was given");
    seeds.push_back(r.seed ? *r.seed : run_seed(*master, i));
  }

  // Target-only greedy references, shared by runs with equal settings.
  std::map<std::string, std::vector<TokenSeq>> references;
  auto reference_key = [](const RunSpec& r) {
    std::string key = r.target + "|" + std::to_string(r.max_new_tokens);
    for (const auto& s : r.stop_pieces) key += "|" + s;
    return key;
  };
  if (config.verify_greedy) {
    for (const auto& r : config.runs) {
      if (r.mode != DecodeMode::Greedy || references.count(reference_key(r))) continue;
      RunSpec ar = r;
      ar.method = "autoregressive";
      ar.drafts.clear();
      references[reference_key(r)] = execute_run(ar, models, 0).outputs;
    }
  }

  std::vector<RunResult> results(config.runs.size());
  std::vector<std::exception_ptr> errors(config.runs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < config.runs.size(); i = next++) {
      try {
        results[i] = execute_run(config.runs[i], models, seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min(config.threads, config.runs.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  BenchReport report;
  report.vocab_size = models.vocab.size();
  report.prompt_count = models.prompts.size();
  report.master_seed = master.value_or(0);
  report.ms_costs = models.ms_costs();
  report.pw_costs = config.pw_costs;
  for (auto& r : results) {
    if (r.spec.mode == DecodeMode::Greedy && config.verify_greedy) {
      // sd with lenience loosens the target review itself, so divergence is
      // expected there and only recorded.
      const bool lossy = r.spec.method == "sd" && r.spec.lenience > 1.0;
      try {
        check_greedy_equivalence(r, references.at(reference_key(r.spec)), models.vocab);
        r.greedy_equivalent = true;
      } catch (const EquivalenceError&) {
        if (!lossy) throw;
        r.greedy_equivalent = false;
      }
    }
    r.swi_ms = swi(r.trace, report.ms_costs);
    if (!report.pw_costs.empty()) r.swi_pw = swi(r.trace, report.pw_costs);
    report.runs.push_back(std::move(r));
  }
  return report;
}

const RunResult* BenchReport::find(const std::string& name) const {
  for (const auto& r : runs)
    if (r.spec.name == name) return &r;
  return nullptr;
}

std::string BenchReport::to_json() const {
  json j;
  j["report_version"] = 1;
  j["vocab_size"] = vocab_size;
  j["prompts"] = prompt_count;
  j["master_seed"] = master_seed;
  j["cost_presets"]["MS"] = ms_costs;
  j["cost_presets"]["PW"] = pw_costs.empty() ? json(nullptr) : json(pw_costs);
  j["runs"] = json::array();
  for (const auto& r : runs) {
    json o;
    o["name"] = r.spec.name;
    o["method"] = r.spec.method;
    o["mode"] = std::string(to_string(r.spec.mode));
    o["target"] = r.spec.target;
    o["drafts"] = r.spec.drafts;
    if (r.spec.method == "sd") o["k"] = r.spec.k;
    if (r.spec.method == "csd") o["k_matrix"] = r.spec.k_matrix.rows();
    o["lenience"] = r.spec.lenience;
    o["max_new_tokens"] = r.spec.max_new_tokens;
    o["seed"] = r.seed;
    o["tokens_emitted"] = r.trace.tokens_emitted;
    o["target_calls"] = r.trace.target_calls();
    o["calls_per_model"] = r.trace.calls_per_model;
    o["cost_units"] = r.trace.cost_units;
    o["swi"]["MS"] = r.swi_ms;
    o["swi"]["PW"] = r.swi_pw ? json(*r.swi_pw) : json(nullptr);
    o["outer_reviews"] = r.outer_reviews;
    o["positional_acceptance"] = r.positional_acceptance;
    o["greedy_equivalent"] = r.greedy_equivalent ? json(*r.greedy_equivalent) : json(nullptr);
    o["warnings"] = r.trace.warnings;
    j["runs"].push_back(std::move(o));
  }
  return j.dump(2) + "\n";
}

std::string BenchReport::to_csv() const {
  std::ostringstream ss;
  ss << "name,method,mode,tokens_emitted,target_calls,cost_units,swi_ms,swi_pw,greedy_equivalent,wall_seconds\n";
  for (const auto& r : runs) {
    ss << r.spec.name << ',' << r.spec.method << ',' << to_string(r.spec.mode) << ',' << r.trace.tokens_emitted << ','
       << r.trace.target_calls() << ',' << fmt_double(r.trace.cost_units) << ',' << fmt_double(r.swi_ms) << ','
       << (r.swi_pw ? fmt_double(*r.swi_pw) : "") << ','
       << (r.greedy_equivalent ? (*r.greedy_equivalent ? "true" : "false") : "") << ','
       << fmt_double(r.wall_seconds) << '\n';
  }
  return ss.str();
}

// ---------------------------------------------------------------- positional acceptance

double AcceptanceCurve::rate(std::size_t i) const {
  require(i >= 1 && i <= k, "position outside the curve");
  return steps ? static_cast<double>(accepted[i - 1]) / static_cast<double>(steps) : 0.0;
}

double AcceptanceCurve::conditional(std::size_t i) const {
  require(i >= 1 && i <= k, "position outside the curve");
  return reached[i - 1] ? static_cast<double>(accepted[i - 1]) / static_cast<double>(reached[i - 1]) : 0.0;
}

double AcceptanceCurve::ci95(std::size_t i) const {
  const double p = rate(i);
  return steps ? 1.96 * std::sqrt(p * (1.0 - p) / static_cast<double>(steps)) : 0.0;
}

std::vector<double> AcceptanceCurve::rates() const {
  std::vector<double> out;
  for (std::size_t i = 1; i <= k; ++i) out.push_back(rate(i));
  return out;
}

AcceptanceCurve measure_positional_acceptance(const LanguageModel& target, const LanguageModel& draft, std::size_t k,
                                              std::span<const TokenSeq> prompts, std::size_t steps, DecodeMode mode,
                                              RandomSource& rng, std::size_t max_growth) {
  require(k >= 1, "accept-curve needs k >= 1");
  require(steps >= 1, "accept-curve needs steps >= 1");
  require(!prompts.empty(), "accept-curve needs at least one prompt");
  require(max_growth >= 1, "accept-curve needs max_growth >= 1");
  AcceptanceCurve curve;
  curve.k = k;
  curve.steps = steps;
  curve.accepted.assign(k, 0);
  curve.reached.assign(k, 0);

  std::size_t p = 0;
  TokenSeq context;
  ModelPtr t, d;
  auto start_prompt = [&] {
    context = prompts[p % prompts.size()];
    require(!context.empty(), "accept-curve prompts must be non-empty");
    t = target.bind_prompt(context);
    d = draft.bind_prompt(context);
    ++p;
  };
  start_prompt();
  std::size_t base = context.size();
  for (std::size_t s = 0; s < steps; ++s) {
    if (context.size() - base >= max_growth) {
      start_prompt();
      base = context.size();
    }
    ReviewOutcome out = sd_step(*t, *d, k, Lenience{}, context, mode, rng);
    for (std::size_t i = 0; i < out.accepted_count; ++i) ++curve.accepted[i];
    for (std::size_t i = 0; i < std::min(k, out.accepted_count + 1); ++i) ++curve.reached[i];
    context.insert(context.end(), out.emitted.begin(), out.emitted.end());
  }
  return curve;
}

std::string curve_csv(const AcceptanceCurve& curve) {
  std::ostringstream ss;
  ss << "position,accept_rate,n\n";
  for (std::size_t i = 1; i <= curve.k; ++i) ss << i << ',' << fmt_double(curve.rate(i)) << ',' << curve.steps << '\n';
  return ss.str();
}

std::string curve_conditional_csv(const AcceptanceCurve& curve) {
  std::ostringstream ss;
  ss << "position,conditional_rate,n_reached\n";
  for (std::size_t i = 1; i <= curve.k; ++i)
    ss << i << ',' << fmt_double(curve.conditional(i)) << ',' << curve.reached[i - 1] << '\n';
  return ss.str();
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[idx[m]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

SpearmanResult spearman_decreasing(std::span<const double> values) {
  require(values.size() >= 3, "spearman test needs at least 3 values");
  std::vector<double> pos(values.size());
  std::iota(pos.begin(), pos.end(), 1.0);
  const auto rx = average_ranks(pos);
  const auto ry = average_ranks(values);
  const double n = static_cast<double>(values.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  SpearmanResult res;
  if (syy == 0.0) return res;  // constant curve: no trend
  res.rho = sxy / std::sqrt(sxx * syy);
  if (res.rho <= -1.0) {
    res.p_value = 0.0;
    return res;
  }
  const double t = res.rho * std::sqrt((n - 2.0) / (1.0 - res.rho * res.rho));
  boost::math::students_t dist(n - 2.0);
  res.p_value = boost::math::cdf(dist, t);
  return res;
}

// ---------------------------------------------------------------- analysis grid

namespace {

std::string describe(const SimulationSpec& spec) {
  std::ostringstream ss;
  if (const auto* s = std::get_if<SdSpec>(&spec)) {
    ss << "alpha=" << s->alpha << " c=" << s->c << " k=" << s->k;
  } else if (const auto* v = std::get_if<VerticalSpec>(&spec)) {
    ss << "alpha=" << v->alpha << " alpha_prime=" << v->alpha_prime << " k=" << v->k << " n=" << v->n
       << " c1=" << v->c1 << " c2=" << v->c2;
  } else {
    const auto& p = std::get<AcceptanceProfile>(spec);
    ss << "alphas=[";
    for (std::size_t i = 0; i < p.size(); ++i) ss << (i ? " " : "") << p.alphas[i];
    ss << "] costs=[";
    for (std::size_t i = 0; i < p.size(); ++i) ss << (i ? " " : "") << p.costs[i];
    ss << "]";
  }
  return ss.str();
}

std::pair<std::string, SimulationSpec> parse_sim_spec(const json& j, const std::string& policy) {
  if (policy == "sd") return {policy, SdSpec{j.at("alpha").get<double>(), j.at("c").get<double>(), j.at("k").get<std::size_t>()}};
  if (policy == "vertical") {
    VerticalSpec v;
    v.alpha = j.at("alpha").get<double>();
    v.alpha_prime = j.at("alpha_prime").get<double>();
    v.k = j.at("k").get<std::size_t>();
    v.n = j.at("n").get<std::size_t>();
    v.c1 = j.at("c1").get<double>();
    v.c2 = j.value("c2", 0.0);
    return {policy, v};
  }
  if (policy == "horizontal") {
    const auto alphas = j.at("alphas").get<std::vector<double>>();
    const auto costs = j.at("costs").get<std::vector<double>>();
    if (j.contains("split")) {
      const auto split = j["split"].get<std::vector<std::size_t>>();
      return {policy, AcceptanceProfile::from_split(alphas, costs, split)};
    }
    AcceptanceProfile p{alphas, costs};
    p.validate();
    return {policy, p};
  }
  throw ConfigError("unknown analysis policy '" + policy + "'");
}

AnalysisRow evaluate_row(const std::string& policy, std::string label, const SimulationSpec& spec,
                         std::size_t trials, std::uint64_t seed) {
  AnalysisRow row;
  row.policy = policy;
  row.label = std::move(label);
  row.params = describe(spec);
  row.spec = spec;
  row.closed_form = closed_form_ewif(spec);
  row.simulated = simulate_ewif(spec, trials, seed);
  row.rel_error = std::abs(row.simulated.mean - row.closed_form) / row.closed_form;
  row.within_3ci = std::abs(row.simulated.mean - row.closed_form) <= 3.0 * row.simulated.ci95 + 1e-12;
  if (policy == "vertical") row.note = "outer review priced as 1 + n*c1 + n*k*c2";
  return row;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

AnalysisResult analyze_grid(const std::string& json_text, std::optional<std::uint64_t> seed) {
  AnalysisResult result;
  try {
    const json j = json::parse(json_text);
    const std::size_t trials = j.value("trials", std::size_t{1000000});
    if (trials < 1) throw ConfigError("analysis grid needs trials >= 1");
    const std::uint64_t base_seed = seed ? *seed : j.value("seed", std::uint64_t{0});
    std::size_t index = 0;
    for (const char* policy : {"sd", "vertical", "horizontal"}) {
      if (!j.contains(policy)) continue;
      for (const auto& entry : j[policy]) {
        auto [p, spec] = parse_sim_spec(entry, policy);
        result.rows.push_back(evaluate_row(p, entry.value("label", std::string()), spec, trials,
                                           RandomSource::split(base_seed, index++)));
      }
    }
    if (j.contains("table")) {
      for (const auto& entry : j["table"]) {
        auto [p, spec] = parse_sim_spec(entry, entry.at("policy").get<std::string>());
        AnalysisRow row = evaluate_row(p, entry.value("label", p), spec, trials, RandomSource::split(base_seed, index++));
        result.table.push_back(row);
        result.rows.push_back(std::move(row));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("analysis grid: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("analysis grid: ") + e.what());
  }
  if (result.rows.empty()) throw ConfigError("analysis grid has no entries");
  return result;
}

std::string AnalysisResult::to_csv() const {
  std::ostringstream ss;
  ss << "policy,label,params,closed_form,simulated,ci95,trials,rel_error,within_3ci,note\n";
  for (const auto& r : rows) {
    ss << r.policy << ',' << csv_field(r.label) << ',' << csv_field(r.params) << ',' << fmt_double(r.closed_form) << ','
       << fmt_double(r.simulated.mean) << ',' << fmt_double(r.simulated.ci95) << ',' << r.simulated.trials << ','
       << fmt_double(r.rel_error) << ',' << (r.within_3ci ? "true" : "false") << ',' << csv_field(r.note) << '\n';
  }
  return ss.str();
}

std::string AnalysisResult::table_text() const {
  const auto& src = table.empty() ? rows : table;
  std::size_t width = 5;
  for (const auto& r : src) width = std::max(width, (r.label.empty() ? r.policy : r.label).size());
  std::ostringstream ss;
  ss << std::left << std::setw(static_cast<int>(width)) << "label" << "  " << std::setw(10) << "policy"
     << std::right << std::setw(12) << "closed" << std::setw(12) << "simulated" << std::setw(10) << "ci95"
     << std::setw(6) << "rank" << '\n';
  std::vector<std::size_t> order(src.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return src[a].closed_form > src[b].closed_form; });
  std::vector<std::size_t> rank(src.size());
  for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = i + 1;
  ss << std::fixed;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto& r = src[i];
    ss << std::left << std::setw(static_cast<int>(width)) << (r.label.empty() ? r.policy : r.label) << "  "
       << std::setw(10) << r.policy << std::right << std::setprecision(4) << std::setw(12) << r.closed_form
       << std::setw(12) << r.simulated.mean << std::setw(10) << r.simulated.ci95 << std::setw(6) << rank[i] << '\n';
  }
  return ss.str();
}

}  // namespace csd
