#include "csd/statlm.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace csd {

using nlohmann::json;

namespace detail {

std::string context_key(std::span<const TokenId> context) {
  std::string key(context.size() * sizeof(TokenId), '\0');
  if (!context.empty()) std::memcpy(key.data(), context.data(), key.size());
  return key;
}

std::string context_key_text(std::string_view key) {
  std::string out;
  for (std::size_t i = 0; i + sizeof(TokenId) <= key.size(); i += sizeof(TokenId)) {
    TokenId t;
    std::memcpy(&t, key.data() + i, sizeof(TokenId));
    if (!out.empty()) out += ' ';
    out += std::to_string(t);
  }
  return out;
}

std::string context_key_from_text(std::string_view text) {
  TokenSeq ids;
  std::istringstream in{std::string(text)};
  long long v;
  while (in >> v) ids.push_back(static_cast<TokenId>(v));
  if (!in.eof()) throw ConfigError("bad context key '" + std::string(text) + "'");
  return context_key(ids);
}

}  // namespace detail

namespace {

using detail::ContextTable;

double row_mass(const SparseRow& row) {
  double s = 0.0;
  for (const auto& [t, p] : row) s += p;
  return s;
}

void check_row(const SparseRow& row, std::size_t vocab_size, const std::string& where) {
  for (const auto& [t, p] : row) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw ConfigError(where + ": token id out of range");
    if (!(p >= 0.0 && std::isfinite(p))) throw ConfigError(where + ": negative or non-finite probability");
  }
  if (std::abs(row_mass(row) - 1.0) > 1e-9) throw ConfigError(where + ": row is not normalized");
}

// Counts every n-gram of length `len` by sorting start positions; returns
// maximum-likelihood rows keyed by the (len - 1)-token context.
ContextTable count_rows(std::span<const TokenId> corpus, std::size_t len) {
  ContextTable table;
  if (corpus.size() < len) return table;
  std::vector<std::uint32_t> starts(corpus.size() - len + 1);
  std::iota(starts.begin(), starts.end(), 0u);
  std::sort(starts.begin(), starts.end(), [&](std::uint32_t a, std::uint32_t b) {
    for (std::size_t i = 0; i < len; ++i) {
      if (corpus[a + i] != corpus[b + i]) return corpus[a + i] < corpus[b + i];
    }
    return a < b;
  });
  const std::size_t ctx = len - 1;
  std::size_t i = 0;
  while (i < starts.size()) {
    const auto context = corpus.subspan(starts[i], ctx);
    std::size_t j = i;
    SparseRow row;
    while (j < starts.size() && std::equal(context.begin(), context.end(), corpus.begin() + starts[j])) {
      const TokenId tok = corpus[starts[j] + ctx];
      if (row.empty() || row.back().first != tok) row.emplace_back(tok, 0.0);
      row.back().second += 1.0;
      ++j;
    }
    const double total = static_cast<double>(j - i);
    for (auto& [t, c] : row) c /= total;
    table.emplace(detail::context_key(context), std::move(row));
    i = j;
  }
  return table;
}

}  // namespace

// ---------------------------------------------------------------- NGramModel

double Smoothing::weight_for_order(std::size_t order) const {
  if (order >= 2 && order - 2 < weights.size()) return weights[order - 2];
  return default_weight;
}

NGramModel::NGramModel(std::string name, Vocab vocab, std::size_t order, Smoothing smoothing,
                       std::vector<ContextTable> tables, std::optional<double> cost_weight)
    : name_(std::move(name)), vocab_(std::move(vocab)), order_(order), smoothing_(std::move(smoothing)),
      tables_(std::move(tables)) {
  require(order_ >= 1, "n-gram order must be >= 1");
  require(tables_.size() == order_, "n-gram model needs one table per context length");
  require(smoothing_.uniform_weight >= 0.0 && smoothing_.uniform_weight <= 1.0, "uniform weight outside [0, 1]");
  for (std::size_t k = 2; k <= order_; ++k) {
    const double w = smoothing_.weight_for_order(k);
    require(w >= 0.0 && w <= 1.0, "interpolation weight outside [0, 1]");
  }
  for (std::size_t k = 0; k < order_; ++k)
    for (const auto& [key, row] : tables_[k]) check_row(row, vocab_.size(), name_ + " table " + std::to_string(k));

  const std::size_t v = vocab_.size();
  base_.assign(v, smoothing_.uniform_weight / static_cast<double>(v));
  auto uni = tables_[0].find(std::string_view{});
  if (uni != tables_[0].end()) {
    for (const auto& [t, p] : uni->second) base_[static_cast<std::size_t>(t)] += (1.0 - smoothing_.uniform_weight) * p;
  } else {
    for (double& b : base_) b = 1.0 / static_cast<double>(v);
  }
  cost_ = cost_weight.value_or(static_cast<double>(table_size()));
  require(cost_ >= 0.0, "cost weight must be >= 0");
}

std::size_t NGramModel::table_size() const {
  std::size_t n = 0;
  for (const auto& t : tables_)
    for (const auto& [key, row] : t) n += row.size();
  return n;
}

const SparseRow* NGramModel::ml_row(std::span<const TokenId> context) const {
  if (context.size() >= order_) return nullptr;
  const std::string key = detail::context_key(context);
  auto it = tables_[context.size()].find(std::string_view(key));
  return it == tables_[context.size()].end() ? nullptr : &it->second;
}

Distribution NGramModel::at(std::span<const TokenId> context) const {
  std::vector<double> p = base_;
  char buf[64 * sizeof(TokenId)];
  for (std::size_t k = 2; k <= order_; ++k) {
    const std::size_t len = k - 1;
    if (len > context.size()) break;
    const auto ctx = context.subspan(context.size() - len);
    std::string_view key;
    std::string heap_key;
    if (len <= 64) {
      std::memcpy(buf, ctx.data(), len * sizeof(TokenId));
      key = std::string_view(buf, len * sizeof(TokenId));
    } else {
      heap_key = detail::context_key(ctx);
      key = heap_key;
    }
    auto it = tables_[len].find(key);
    if (it == tables_[len].end()) continue;
    const double w = smoothing_.weight_for_order(k);
    for (double& x : p) x *= (1.0 - w);
    for (const auto& [t, q] : it->second) p[static_cast<std::size_t>(t)] += w * q;
  }
  return normalize(p);
}

std::vector<Distribution> NGramModel::do_evaluate(std::span<const TokenId> tokens, std::size_t start) const {
  std::vector<Distribution> out;
  out.reserve(tokens.size() + 2 - start);
  for (std::size_t p = start; p <= tokens.size() + 1; ++p) out.push_back(at(tokens.first(p - 1)));
  return out;
}

// ---------------------------------------------------------------- BigramTable

BigramTable::BigramTable(std::string name, Vocab vocab, ContextTable rows, std::optional<double> cost_weight)
    : name_(std::move(name)), vocab_(std::move(vocab)), rows_(std::move(rows)) {
  for (const auto& [key, row] : rows_) {
    require(key.size() == sizeof(TokenId), "bigram rows are keyed by a single previous token");
    check_row(row, vocab_.size(), name_);
  }
  cost_ = cost_weight.value_or(static_cast<double>(table_size()));
  require(cost_ >= 0.0, "cost weight must be >= 0");
}

std::size_t BigramTable::table_size() const {
  std::size_t n = 0;
  for (const auto& [key, row] : rows_) n += row.size();
  return n;
}

Distribution BigramTable::row(std::optional<TokenId> previous) const {
  const std::size_t v = vocab_.size();
  if (previous) {
    auto it = rows_.find(std::string_view(reinterpret_cast<const char*>(&*previous), sizeof(TokenId)));
    if (it != rows_.end()) {
      std::vector<double> p(v, 0.0);
      for (const auto& [t, q] : it->second) p[static_cast<std::size_t>(t)] = q;
      return normalize(p);
    }
  }
  return Distribution::uniform(v);
}

std::vector<Distribution> BigramTable::do_evaluate(std::span<const TokenId> tokens, std::size_t start) const {
  std::vector<Distribution> out;
  out.reserve(tokens.size() + 2 - start);
  for (std::size_t p = start; p <= tokens.size() + 1; ++p)
    out.push_back(row(p >= 2 ? std::optional<TokenId>(tokens[p - 2]) : std::nullopt));
  return out;
}

// ---------------------------------------------------------------- Max-Gram

std::string_view to_string(MatchPolicy policy) {
  return policy == MatchPolicy::PromptOnly ? "prompt" : "prompt+generation";
}

MatchPolicy match_policy_from_string(std::string_view name) {
  if (name == "prompt") return MatchPolicy::PromptOnly;
  if (name == "prompt+generation") return MatchPolicy::PromptAndGeneration;
  throw ConfigError("unknown match policy '" + std::string(name) + "' (expected prompt or prompt+generation)");
}

namespace {

struct SuffixMatch {
  std::size_t start = 0;
  std::size_t length = 0;
};

// Longest suffix of `generated` occurring in `corpus` with its last token at
// an index < `end_limit`; earliest start among the longest.
std::optional<SuffixMatch> longest_suffix_match(std::span<const TokenId> generated, std::span<const TokenId> corpus,
                                                std::size_t end_limit) {
  if (generated.empty()) return std::nullopt;
  const std::size_t g = generated.size();
  std::optional<SuffixMatch> best;
  for (std::size_t e = 0; e < std::min(end_limit, corpus.size()); ++e) {
    std::size_t len = 0;
    while (len < g && len <= e && corpus[e - len] == generated[g - 1 - len]) ++len;
    if (len > 0 && (!best || len > best->length)) best = SuffixMatch{e + 1 - len, len};
  }
  return best;
}

}  // namespace

std::optional<TokenSeq> mag_propose(std::span<const TokenId> generated, std::span<const TokenId> corpus, std::size_t n) {
  require(!generated.empty(), "mag_propose needs a non-empty generation");
  require(n >= 1, "mag_propose needs n >= 1");
  auto m = longest_suffix_match(generated, corpus, corpus.size());
  if (!m) return std::nullopt;
  const std::size_t from = m->start + m->length;
  const std::size_t to = std::min(corpus.size(), from + n);
  return TokenSeq(corpus.begin() + static_cast<std::ptrdiff_t>(from), corpus.begin() + static_cast<std::ptrdiff_t>(to));
}

MagModel::MagModel(std::string name, std::shared_ptr<const BigramTable> fallback, std::size_t span, MatchPolicy policy,
                   double cost_weight)
    : name_(std::move(name)), fallback_(std::move(fallback)), span_(span), policy_(policy), cost_(cost_weight) {
  require(fallback_ != nullptr, "Max-Gram needs a bigram fallback");
  require(span_ >= 1, "Max-Gram span must be >= 1");
  require(cost_ >= 0.0, "cost weight must be >= 0");
}

std::shared_ptr<const LanguageModel> MagModel::bind_prompt(std::span<const TokenId> prompt) const {
  if (policy_ != MatchPolicy::PromptOnly) return shared_from_this();
  auto bound = std::make_shared<MagModel>(name_, fallback_, span_, policy_, cost_);
  bound->prompt_ = TokenSeq(prompt.begin(), prompt.end());
  return bound;
}

std::optional<TokenId> MagModel::copied_next(std::span<const TokenId> context) const {
  if (context.empty()) return std::nullopt;
  if (policy_ == MatchPolicy::PromptOnly) {
    if (!prompt_) return std::nullopt;
    auto next = mag_propose(context, *prompt_, 1);
    if (!next || next->empty()) return std::nullopt;
    return next->front();
  }
  // Matching against the context itself: exclude the trivial self-match by
  // requiring the occurrence to end before the last context token.
  auto m = longest_suffix_match(context, context, context.size() - 1);
  if (!m) return std::nullopt;
  return context[m->start + m->length];
}

std::vector<Distribution> MagModel::do_evaluate(std::span<const TokenId> tokens, std::size_t start) const {
  std::vector<Distribution> out;
  out.reserve(tokens.size() + 2 - start);
  const std::size_t v = vocab().size();
  for (std::size_t p = start; p <= tokens.size() + 1; ++p) {
    const auto context = tokens.first(p - 1);
    if (auto next = copied_next(context)) {
      out.push_back(Distribution::point_mass(v, *next));
    } else {
      out.push_back(fallback_->row(context.empty() ? std::nullopt : std::optional<TokenId>(context.back())));
    }
  }
  return out;
}

// ---------------------------------------------------------------- training

NGramModel train_ngram(std::string name, const Vocab& vocab, std::span<const TokenId> corpus, std::size_t order,
                       Smoothing smoothing) {
  if (corpus.empty()) throw TrainingError("cannot train an n-gram model on an empty corpus");
  if (order < 1) throw TrainingError("n-gram order must be >= 1");
  for (TokenId t : corpus)
    if (!vocab.contains(t)) throw TrainingError("corpus token " + std::to_string(t) + " outside vocabulary");
  std::vector<ContextTable> tables;
  tables.reserve(order);
  for (std::size_t len = 1; len <= order; ++len) tables.push_back(count_rows(corpus, len));
  return NGramModel(std::move(name), vocab, order, std::move(smoothing), std::move(tables));
}

BigramTable train_bigram(std::string name, const Vocab& vocab, std::span<const TokenId> corpus) {
  if (corpus.empty()) throw TrainingError("cannot train a bigram table on an empty corpus");
  for (TokenId t : corpus)
    if (!vocab.contains(t)) throw TrainingError("corpus token " + std::to_string(t) + " outside vocabulary");
  return BigramTable(std::move(name), vocab, count_rows(corpus, 2));
}

double perplexity(const LanguageModel& model, std::span<const TokenId> tokens) {
  require(tokens.size() >= 2, "perplexity needs at least 2 tokens");
  const auto dists = model.evaluate(tokens, 2);
  double nll = 0.0;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const double p = dists[i - 1][tokens[i]];
    if (p <= 0.0) return std::numeric_limits<double>::infinity();
    nll -= std::log(p);
  }
  return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

// ---------------------------------------------------------------- model files

namespace {

constexpr int kFormatVersion = 1;

json table_to_json(const ContextTable& table) {
  // std::map orders the keys so the document is deterministic.
  std::map<std::string, const SparseRow*> sorted;
  for (const auto& [key, row] : table) sorted.emplace(detail::context_key_text(key), &row);
  json out = json::object();
  for (const auto& [text, row] : sorted) {
    json r = json::array();
    for (const auto& [t, p] : *row) r.push_back(json::array({t, p}));
    out[text] = std::move(r);
  }
  return out;
}

ContextTable table_from_json(const json& j, std::size_t context_len, const std::string& origin) {
  ContextTable table;
  for (const auto& [text, rows] : j.items()) {
    std::string key = detail::context_key_from_text(text);
    if (key.size() != context_len * sizeof(TokenId)) continue;
    SparseRow row;
    for (const auto& e : rows) row.emplace_back(e.at(0).get<TokenId>(), e.at(1).get<double>());
    if (!std::is_sorted(row.begin(), row.end())) std::sort(row.begin(), row.end());
    table.emplace(std::move(key), std::move(row));
  }
  (void)origin;
  return table;
}

json vocab_to_json(const Vocab& v) { return v.serialized_pieces(); }

Vocab vocab_from_json(const json& doc) {
  const auto kind = tokenizer_from_string(doc.value("tokenizer", std::string("byte")));
  return Vocab::from_serialized(kind, doc.at("vocab").get<std::vector<std::string>>());
}

json bigram_json(const BigramTable& b) {
  json doc;
  doc["format_version"] = kFormatVersion;
  doc["type"] = "bigram";
  doc["name"] = b.descriptor();
  doc["tokenizer"] = std::string(to_string(b.vocab().kind()));
  doc["vocab"] = vocab_to_json(b.vocab());
  doc["order"] = 2;
  doc["cost_weight"] = b.cost_weight();
  doc["tables"] = table_to_json(b.rows());
  return doc;
}

}  // namespace

std::string model_to_json(const LanguageModel& model) {
  json doc;
  if (const auto* ng = dynamic_cast<const NGramModel*>(&model)) {
    doc["format_version"] = kFormatVersion;
    doc["type"] = "ngram";
    doc["name"] = ng->descriptor();
    doc["tokenizer"] = std::string(to_string(ng->vocab().kind()));
    doc["vocab"] = vocab_to_json(ng->vocab());
    doc["order"] = ng->order();
    doc["cost_weight"] = ng->cost_weight();
    std::vector<double> weights;
    for (std::size_t k = 2; k <= ng->order(); ++k) weights.push_back(ng->smoothing().weight_for_order(k));
    doc["smoothing"] = {{"weights", weights}, {"uniform_weight", ng->smoothing().uniform_weight}};
    json tables = json::object();
    for (const auto& t : ng->tables()) tables.update(table_to_json(t));
    doc["tables"] = std::move(tables);
  } else if (const auto* bg = dynamic_cast<const BigramTable*>(&model)) {
    doc = bigram_json(*bg);
  } else if (const auto* mag = dynamic_cast<const MagModel*>(&model)) {
    doc = bigram_json(mag->fallback());
    doc["type"] = "mag";
    doc["name"] = mag->descriptor();
    doc["fallback_name"] = mag->fallback().descriptor();
    doc["fallback_cost_weight"] = mag->fallback().cost_weight();
    doc["cost_weight"] = mag->cost_weight();
    doc["span"] = mag->span();
    doc["match_policy"] = std::string(to_string(mag->policy()));
  } else {
    throw ContractViolation("model '" + model.descriptor() + "' has no file representation");
  }
  return doc.dump();
}

std::shared_ptr<LanguageModel> model_from_json(const std::string& text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
  try {
    if (doc.value("format_version", 0) != kFormatVersion)
      throw ConfigError(origin + ": unsupported format_version (expected 1)");
    const std::string type = doc.at("type").get<std::string>();
    const std::string name = doc.value("name", std::string("model"));
    Vocab vocab = vocab_from_json(doc);
    std::optional<double> cost;
    if (doc.contains("cost_weight")) cost = doc.at("cost_weight").get<double>();
    const json& tables = doc.at("tables");
    if (type == "ngram") {
      const auto order = doc.at("order").get<std::size_t>();
      if (order < 1) throw ConfigError(origin + ": order must be >= 1");
      Smoothing s;
      if (doc.contains("smoothing")) {
        const json& sm = doc.at("smoothing");
        s.weights = sm.value("weights", std::vector<double>{});
        s.uniform_weight = sm.value("uniform_weight", 0.0);
      }
      std::vector<ContextTable> t;
      for (std::size_t len = 0; len < order; ++len) t.push_back(table_from_json(tables, len, origin));
      return std::make_shared<NGramModel>(name, std::move(vocab), order, std::move(s), std::move(t), cost);
    }
    if (type == "bigram") return std::make_shared<BigramTable>(name, std::move(vocab), table_from_json(tables, 1, origin), cost);
    if (type == "mag") {
      std::optional<double> fb_cost;
      if (doc.contains("fallback_cost_weight")) fb_cost = doc.at("fallback_cost_weight").get<double>();
      auto fb = std::make_shared<BigramTable>(doc.value("fallback_name", name + "-bigram"), std::move(vocab),
                                              table_from_json(tables, 1, origin), fb_cost);
      return std::make_shared<MagModel>(name, std::move(fb), doc.value("span", std::size_t{10}),
                                        match_policy_from_string(doc.value("match_policy", std::string("prompt+generation"))),
                                        cost.value_or(0.0));
    }
    throw ConfigError(origin + ": unknown model type '" + type + "'");
  } catch (const json::exception& e) {
    throw ConfigError(origin + ": malformed model file: " + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

std::shared_ptr<LanguageModel> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read model file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return model_from_json(ss.str(), path);
}

void save_model(const LanguageModel& model, const std::string& path) {
  const std::string text = model_to_json(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model file '" + path + "'");
  out << text << '\n';
  if (!out) throw IoError("failed writing model file '" + path + "'");
}

}  // namespace csd
