#include "csd/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

namespace csd {

namespace {

constexpr double kNormTolerance = 1e-9;

const char* const kSpecialPieces[] = {"<bos>", "<eos>", "<unk>"};

std::string byte_piece(unsigned char b) {
  if (b >= 0x20 && b < 0x7f) return std::string(1, static_cast<char>(b));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "<0x%02X>", b);
  return buf;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

}  // namespace

std::string_view to_string(TokenizerKind kind) {
  switch (kind) {
    case TokenizerKind::Byte: return "byte";
    case TokenizerKind::Word: return "word";
    case TokenizerKind::Opaque: return "opaque";
  }
  return "opaque";
}

TokenizerKind tokenizer_from_string(std::string_view name) {
  if (name == "byte") return TokenizerKind::Byte;
  if (name == "word") return TokenizerKind::Word;
  if (name == "opaque") return TokenizerKind::Opaque;
  throw ConfigError("unknown tokenizer '" + std::string(name) + "' (expected byte, word or opaque)");
}

// ---------------------------------------------------------------- Vocab

Vocab::Vocab(TokenizerKind kind, std::vector<std::string> pieces) : kind_(kind), pieces_(std::move(pieces)) {
  if (pieces_.size() < 2) throw ContractViolation("vocabulary needs at least 2 entries");
  index_.reserve(pieces_.size());
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    if (!index_.emplace(pieces_[i], static_cast<TokenId>(i)).second)
      throw ContractViolation("duplicate vocabulary piece '" + pieces_[i] + "'");
  }
}

Vocab Vocab::opaque(std::size_t size) {
  std::vector<std::string> pieces;
  pieces.reserve(size);
  for (std::size_t i = 0; i < size; ++i) pieces.push_back("<" + std::to_string(i) + ">");
  return Vocab(TokenizerKind::Opaque, std::move(pieces));
}

Vocab Vocab::build(TokenizerKind kind, std::string_view text) {
  std::vector<std::string> pieces(std::begin(kSpecialPieces), std::end(kSpecialPieces));
  if (kind == TokenizerKind::Byte) {
    std::set<unsigned char> bytes(text.begin(), text.end());
    for (unsigned char b : bytes) pieces.emplace_back(1, static_cast<char>(b));
  } else if (kind == TokenizerKind::Word) {
    auto words = split_words(text);
    std::set<std::string> distinct(words.begin(), words.end());
    for (const auto& w : distinct) {
      if (w == kSpecialPieces[0] || w == kSpecialPieces[1] || w == kSpecialPieces[2]) continue;
      pieces.push_back(w);
    }
  } else {
    throw ContractViolation("opaque vocabularies are not built from text");
  }
  return Vocab(kind, std::move(pieces));
}

Vocab Vocab::from_serialized(TokenizerKind kind, const std::vector<std::string>& pieces) {
  if (kind == TokenizerKind::Opaque) return Vocab(kind, pieces);
  if (pieces.size() < 3 || pieces[0] != kSpecialPieces[0] || pieces[1] != kSpecialPieces[1] ||
      pieces[2] != kSpecialPieces[2])
    throw ConfigError("vocabulary must start with <bos>, <eos>, <unk>");
  std::vector<std::string> raw(pieces.begin(), pieces.begin() + 3);
  for (std::size_t i = 3; i < pieces.size(); ++i) {
    const std::string& p = pieces[i];
    if (kind == TokenizerKind::Byte && p.size() == 6 && p.rfind("<0x", 0) == 0 && p.back() == '>') {
      raw.emplace_back(1, static_cast<char>(std::stoi(p.substr(3, 2), nullptr, 16)));
    } else {
      if (kind == TokenizerKind::Byte && p.size() != 1) throw ConfigError("bad byte piece '" + p + "'");
      raw.push_back(p);
    }
  }
  return Vocab(kind, std::move(raw));
}

const std::string& Vocab::piece_of(TokenId id) const {
  require(contains(id), "token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
  return pieces_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::id_of(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenSeq Vocab::tokenize(std::string_view text) const {
  TokenSeq out;
  if (kind_ == TokenizerKind::Byte) {
    out.reserve(text.size());
    for (char c : text) out.push_back(id_of(std::string_view(&c, 1)).value_or(kUnk));
  } else if (kind_ == TokenizerKind::Word) {
    for (const auto& w : split_words(text)) out.push_back(id_of(w).value_or(kUnk));
  } else {
    // Opaque vocabularies accept whitespace-separated integer ids.
    std::istringstream in{std::string(text)};
    long long v;
    while (in >> v) {
      require(v >= 0 && static_cast<std::size_t>(v) < size(), "token id " + std::to_string(v) + " outside vocabulary");
      out.push_back(static_cast<TokenId>(v));
    }
    require(in.eof(), "opaque vocabularies tokenize integer id lists only");
  }
  return out;
}

std::string Vocab::detokenize(std::span<const TokenId> tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& p = piece_of(tokens[i]);
    if (kind_ == TokenizerKind::Byte) {
      out += p;
    } else if (kind_ == TokenizerKind::Word) {
      if (i) out += ' ';
      out += p;
    } else {
      if (i) out += ' ';
      out += std::to_string(tokens[i]);
    }
  }
  return out;
}

std::vector<std::string> Vocab::serialized_pieces() const {
  if (kind_ != TokenizerKind::Byte) return pieces_;
  std::vector<std::string> out(pieces_.begin(), pieces_.begin() + 3);
  for (std::size_t i = 3; i < pieces_.size(); ++i) out.push_back(byte_piece(static_cast<unsigned char>(pieces_[i][0])));
  return out;
}

// ---------------------------------------------------------------- RandomSource

std::uint64_t RandomSource::split(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------- Distribution

Distribution::Distribution(std::vector<double> probs) : probs_(std::move(probs)) {
  require(!probs_.empty(), "distribution over an empty vocabulary");
  for (double p : probs_) require(std::isfinite(p) && p >= 0.0, "distribution entries must be finite and >= 0");
  const double s = sum();
  require(std::abs(s - 1.0) <= kNormTolerance, "distribution is not normalized (sum=" + std::to_string(s) + ")");
}

Distribution Distribution::uniform(std::size_t size) {
  require(size > 0, "uniform distribution over an empty vocabulary");
  return Distribution(std::vector<double>(size, 1.0 / static_cast<double>(size)));
}

Distribution Distribution::point_mass(std::size_t size, TokenId token) {
  require(token >= 0 && static_cast<std::size_t>(token) < size, "point mass outside vocabulary");
  std::vector<double> p(size, 0.0);
  p[static_cast<std::size_t>(token)] = 1.0;
  return Distribution(std::move(p));
}

double Distribution::sum() const { return std::accumulate(probs_.begin(), probs_.end(), 0.0); }

TokenId Distribution::argmax() const {
  require(!probs_.empty(), "argmax of an empty distribution");
  return static_cast<TokenId>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

Distribution normalize(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    require(std::isfinite(w) && w >= 0.0, "normalize expects finite non-negative weights");
    total += w;
  }
  if (!(total > 0.0)) throw DegenerateDistribution("cannot normalize an all-zero weight vector");
  std::vector<double> p(weights.begin(), weights.end());
  for (double& v : p) v /= total;
  return Distribution(std::move(p));
}

Distribution residual(const Distribution& target, const Distribution& draft) {
  require(target.size() == draft.size(), "residual over mismatched vocabularies");
  std::vector<double> w(target.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::max(0.0, target.probs()[i] - draft.probs()[i]);
  return normalize(w);
}

TokenId sample(const Distribution& dist, RandomSource& rng) {
  const double u = rng.uniform();
  const auto p = dist.probs();
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    cum += p[i];
    last_positive = i;
    if (u < cum) return static_cast<TokenId>(i);
  }
  // Rounding left u above the accumulated mass.
  return static_cast<TokenId>(last_positive);
}

// ---------------------------------------------------------------- LanguageModel

std::vector<Distribution> LanguageModel::evaluate(std::span<const TokenId> tokens, std::size_t start) const {
  if (start < 1 || start > tokens.size() + 1)
    throw ContractViolation("evaluate start " + std::to_string(start) + " outside [1, " +
                            std::to_string(tokens.size() + 1) + "]");
  const auto& v = vocab();
  for (TokenId t : tokens) require(v.contains(t), "token id " + std::to_string(t) + " outside vocabulary");
  return do_evaluate(tokens, start);
}

Distribution LanguageModel::next(std::span<const TokenId> tokens) const {
  return std::move(evaluate(tokens, tokens.size() + 1).front());
}

std::shared_ptr<const LanguageModel> LanguageModel::bind_prompt(std::span<const TokenId>) const {
  return shared_from_this();
}

AliasModel::AliasModel(ModelPtr inner, std::string name, double cost_weight)
    : inner_(std::move(inner)), name_(std::move(name)), cost_(cost_weight) {
  require(inner_ != nullptr, "alias of a null model");
  require(cost_ >= 0.0, "cost weight must be >= 0");
}

std::shared_ptr<const LanguageModel> AliasModel::bind_prompt(std::span<const TokenId> prompt) const {
  auto bound = inner_->bind_prompt(prompt);
  if (bound == inner_) return shared_from_this();
  return std::make_shared<AliasModel>(std::move(bound), name_, cost_);
}

// ---------------------------------------------------------------- MarkovModel

MarkovModel::MarkovModel(std::string name, Distribution initial, std::vector<Distribution> rows, double cost_weight)
    : name_(std::move(name)), initial_(std::move(initial)), rows_(std::move(rows)), cost_(cost_weight) {
  require(!rows_.empty(), "markov model needs at least one row");
  const std::size_t v = initial_.size();
  require(v >= 2, "markov model vocabulary must have at least 2 tokens");
  require(rows_.size() == 1 || rows_.size() == v, "markov model needs 1 or V rows");
  for (const auto& r : rows_) require(r.size() == v, "markov row size mismatch");
  require(cost_ >= 0.0, "cost weight must be >= 0");
  vocab_ = Vocab::opaque(v);
}

std::shared_ptr<MarkovModel> MarkovModel::context_free(std::string name, Distribution dist, double cost_weight) {
  Distribution initial = dist;
  return std::make_shared<MarkovModel>(std::move(name), std::move(initial), std::vector<Distribution>{std::move(dist)},
                                       cost_weight);
}

const Distribution& MarkovModel::row_after(std::optional<TokenId> previous) const {
  if (!previous) return initial_;
  if (rows_.size() == 1) return rows_.front();
  return rows_[static_cast<std::size_t>(*previous)];
}

std::vector<Distribution> MarkovModel::do_evaluate(std::span<const TokenId> tokens, std::size_t start) const {
  std::vector<Distribution> out;
  out.reserve(tokens.size() + 2 - start);
  for (std::size_t p = start; p <= tokens.size() + 1; ++p) {
    const std::size_t ctx = p - 1;
    out.push_back(row_after(ctx == 0 ? std::nullopt : std::optional<TokenId>(tokens[ctx - 1])));
  }
  return out;
}

}  // namespace csd
