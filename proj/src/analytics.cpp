#include "csd/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "csd/kernel.hpp"

namespace csd {

namespace {

void check_rate(double a, const char* what) {
  require(a >= 0.0 && a <= 1.0, std::string(what) + " must lie in [0, 1]");
}

}  // namespace

double gen_fn(double alpha, std::size_t k, double x) {
  check_rate(alpha, "alpha");
  require(k >= 1, "gen_fn needs k >= 1");
  const double ax = alpha * x;
  if (std::abs(1.0 - ax) < 1e-3) {
    // Removable singularity: x + (x - 1) * sum_{i=1..k} (alpha x)^i.
    double s = 0.0, term = 1.0;
    for (std::size_t i = 1; i <= k; ++i) {
      term *= ax;
      s += term;
    }
    return x + (x - 1.0) * s;
  }
  // The closed form's geometric sum starts at i = 0; subtracting that term
  // gives x + (x - 1) sum_{i=1..k}, which is the same function.
  return 1.0 + (x - 1.0) * (1.0 - std::pow(ax, static_cast<double>(k + 1))) / (1.0 - ax);
}

std::vector<double> gen_fn_coefficients(double alpha, std::size_t k) {
  check_rate(alpha, "alpha");
  require(k >= 1, "gen_fn needs k >= 1");
  // x + (x - 1) sum_{i=1..k} alpha^i x^i
  std::vector<double> c(k + 2, 0.0);
  c[1] = 1.0;
  double a = 1.0;
  for (std::size_t i = 1; i <= k; ++i) {
    a *= alpha;
    c[i + 1] += a;
    c[i] -= a;
  }
  return c;
}

std::vector<double> poly_multiply(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  std::vector<double> out(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  return out;
}

std::vector<double> poly_power(std::span<const double> coeffs, std::size_t n) {
  std::vector<double> out{1.0};
  for (std::size_t i = 0; i < n; ++i) out = poly_multiply(out, coeffs);
  return out;
}

double poly_eval(std::span<const double> coeffs, double x) {
  double v = 0.0;
  for (std::size_t i = coeffs.size(); i-- > 0;) v = v * x + coeffs[i];
  return v;
}

double sd_ewif(double alpha, double c, std::size_t k) {
  check_rate(alpha, "alpha");
  require(c >= 0.0, "cost coefficient must be >= 0");
  require(k >= 1, "sd_ewif needs k >= 1");
  const double denom = c * static_cast<double>(k) + 1.0;
  if (alpha == 1.0) return static_cast<double>(k + 1) / denom;
  return (1.0 - std::pow(alpha, static_cast<double>(k + 1))) / ((1.0 - alpha) * denom);
}

double vertical_ewif(double alpha, double alpha_prime, std::size_t k, std::size_t n, double c1, double c2) {
  check_rate(alpha, "alpha");
  check_rate(alpha_prime, "alpha_prime");
  require(k >= 1 && n >= 1, "vertical_ewif needs k, n >= 1");
  require(c1 >= 0.0 && c2 >= 0.0, "cost coefficients must be >= 0");
  const double kk = static_cast<double>(k), nn = static_cast<double>(n);
  const double denom = 1.0 + nn * c1 + nn * kk * c2;
  if (alpha == 1.0) {
    // Limit alpha -> 1: every drafted token is accepted, 1 + n * phi'(1).
    const double per_step = alpha_prime == 1.0 ? kk + 1.0 : (1.0 - std::pow(alpha_prime, kk + 1.0)) / (1.0 - alpha_prime);
    return (1.0 + nn * per_step) / denom;
  }
  const double phi = gen_fn(alpha_prime, k, alpha);
  return (1.0 - alpha * std::pow(phi, nn)) / ((1.0 - alpha) * denom);
}

void AcceptanceProfile::validate() const {
  require(alphas.size() == costs.size(), "acceptance profile: alphas and costs differ in length");
  for (double a : alphas) check_rate(a, "stage acceptance rate");
  for (double c : costs) require(c >= 0.0, "stage cost must be >= 0");
}

AcceptanceProfile AcceptanceProfile::from_split(std::span<const double> alphas, std::span<const double> costs,
                                                std::span<const std::size_t> counts) {
  require(alphas.size() == costs.size() && alphas.size() == counts.size(), "profile split: length mismatch");
  AcceptanceProfile p;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    p.alphas.insert(p.alphas.end(), counts[i], alphas[i]);
    p.costs.insert(p.costs.end(), counts[i], costs[i]);
  }
  p.validate();
  return p;
}

double horizontal_ewif(const AcceptanceProfile& profile) {
  profile.validate();
  double num = 1.0, prod = 1.0, cost = 1.0;
  for (std::size_t i = 0; i < profile.size(); ++i) {
    prod *= profile.alphas[i];
    num += prod;
    cost += profile.costs[i];
  }
  return num / cost;
}

double horizontal_ewif_grad(const AcceptanceProfile& profile, std::size_t l) {
  profile.validate();
  if (l < 1 || l > profile.size())
    throw ContractViolation("stage index " + std::to_string(l) + " outside [1, " + std::to_string(profile.size()) + "]");
  double cost = 1.0;
  for (double c : profile.costs) cost += c;
  double prefix = 1.0;  // prod_{j<l} alpha_j
  for (std::size_t j = 0; j + 1 < l; ++j) prefix *= profile.alphas[j];
  double num = 0.0, tail = 1.0;  // tail: prod_{l<j<=i} alpha_j
  for (std::size_t i = l; i <= profile.size(); ++i) {
    if (i > l) tail *= profile.alphas[i - 1];
    num += prefix * tail;
  }
  return num / cost;
}

double position_acceptance(const AcceptanceProfile& profile, std::size_t i) {
  require(i >= 1 && i <= profile.size(), "position outside the profile");
  double prod = 1.0;
  for (std::size_t j = 0; j < i; ++j) prod *= profile.alphas[j];
  return prod;
}

double t_alpha_expectation(std::span<const double> coeffs, double alpha) {
  check_rate(alpha, "alpha");
  require(!coeffs.empty(), "empty polynomial");
  if (alpha == 1.0) {
    // Limit: 1 + f'(1).
    double d = 0.0;
    for (std::size_t j = 1; j < coeffs.size(); ++j) d += static_cast<double>(j) * coeffs[j];
    return 1.0 + d;
  }
  return (1.0 - alpha * poly_eval(coeffs, alpha)) / (1.0 - alpha);
}

double closed_form_ewif(const SimulationSpec& spec) {
  return std::visit(
      [](const auto& s) -> double {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, SdSpec>) {
          return sd_ewif(s.alpha, s.c, s.k);
        } else if constexpr (std::is_same_v<T, VerticalSpec>) {
          return vertical_ewif(s.alpha, s.alpha_prime, s.k, s.n, s.c1, s.c2);
        } else {
          return horizontal_ewif(s);
        }
      },
      spec);
}

namespace {

constexpr std::size_t kShards = 16;

// Number of leading successes among up to `limit` Bernoulli(alpha) trials.
std::size_t leading_successes(double alpha, std::size_t limit, RandomSource& rng) {
  std::size_t n = 0;
  while (n < limit && rng.uniform() < alpha) ++n;
  return n;
}

// Token counts are integers, so exact integer moments avoid cancellation.
struct Moments {
  std::uint64_t sum = 0;
  unsigned __int128 sum_sq = 0;
  std::size_t count = 0;
};

// Tokens produced by one outer review.
std::size_t trial_tokens(const SimulationSpec& spec, RandomSource& rng) {
  if (const auto* s = std::get_if<SdSpec>(&spec)) return leading_successes(s->alpha, s->k, rng) + 1;
  if (const auto* v = std::get_if<VerticalSpec>(&spec)) {
    std::size_t drafted = 0;
    for (std::size_t step = 0; step < v->n; ++step) drafted += leading_successes(v->alpha_prime, v->k, rng) + 1;
    return leading_successes(v->alpha, drafted, rng) + 1;
  }
  const auto& p = std::get<AcceptanceProfile>(spec);
  std::size_t accepted = 0;
  while (accepted < p.size() && rng.uniform() < p.alphas[accepted]) ++accepted;
  return accepted + 1;
}

// Cost of one outer review in target-run units.
double trial_cost(const SimulationSpec& spec) {
  if (const auto* s = std::get_if<SdSpec>(&spec)) return 1.0 + static_cast<double>(s->k) * s->c;
  if (const auto* v = std::get_if<VerticalSpec>(&spec)) {
    const double n = static_cast<double>(v->n);
    return 1.0 + n * v->c1 + n * static_cast<double>(v->k) * v->c2;
  }
  const auto& p = std::get<AcceptanceProfile>(spec);
  double c = 1.0;
  for (double x : p.costs) c += x;
  return c;
}

}  // namespace

EwifEstimate simulate_ewif(const SimulationSpec& spec, std::size_t trials, std::uint64_t seed) {
  require(trials >= 1, "simulate_ewif needs at least one trial");
  closed_form_ewif(spec);  // validates the parameters
  const double cost = trial_cost(spec);

  std::vector<Moments> shards(kShards);
  auto run_shard = [&](std::size_t s) {
    const std::size_t begin = trials * s / kShards, end = trials * (s + 1) / kShards;
    RandomSource rng(RandomSource::split(seed, s));
    Moments m;
    for (std::size_t t = begin; t < end; ++t) {
      const std::uint64_t v = trial_tokens(spec, rng);
      m.sum += v;
      m.sum_sq += static_cast<unsigned __int128>(v) * v;
      ++m.count;
    }
    shards[s] = m;
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(kShards, std::thread::hardware_concurrency()));
  if (workers == 1) {
    for (std::size_t s = 0; s < kShards; ++s) run_shard(s);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t s = w; s < kShards; s += workers) run_shard(s);
      });
    for (auto& t : pool) t.join();
  }

  Moments total;
  for (const auto& m : shards) {
    total.sum += m.sum;
    total.sum_sq += m.sum_sq;
    total.count += m.count;
  }
  const double n = static_cast<double>(total.count);
  EwifEstimate est;
  est.trials = total.count;
  est.mean = static_cast<double>(total.sum) / n / cost;
  // n * sum_sq - sum^2 is exact and non-negative.
  const unsigned __int128 spread = static_cast<unsigned __int128>(total.count) * total.sum_sq -
                                   static_cast<unsigned __int128>(total.sum) * total.sum;
  const double var = n > 1 ? static_cast<double>(spread) / (n * (n - 1)) / (cost * cost) : 0.0;
  est.ci95 = 1.96 * std::sqrt(var / n);
  return est;
}

SyntheticPair synthetic_pair(const Distribution& base, double alpha, double target_cost, double draft_cost) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConstructionError("synthetic pair needs alpha in (0, 1]");
  if (base.size() < 2) throw ConstructionError("synthetic pair needs a vocabulary of at least 2 tokens");
  const double moved = 1.0 - alpha;
  const TokenId donor = base.argmax();
  const TokenId recipient = donor == 0 ? 1 : 0;
  if (base[donor] < moved)
    throw ConstructionError("alpha " + std::to_string(alpha) + " needs " + std::to_string(moved) +
                            " of movable mass but the largest token holds " + std::to_string(base[donor]));
  std::vector<double> q(base.probs().begin(), base.probs().end());
  q[static_cast<std::size_t>(donor)] -= moved;
  q[static_cast<std::size_t>(recipient)] += moved;
  q[static_cast<std::size_t>(donor)] = std::max(0.0, q[static_cast<std::size_t>(donor)]);
  SyntheticPair pair;
  pair.target = MarkovModel::context_free("synthetic-target", base, target_cost);
  pair.draft = MarkovModel::context_free("synthetic-draft", Distribution(std::move(q)), draft_cost);
  return pair;
}

double swi(const GenerationTrace& trace, const std::map<std::string, double>& cost_model) {
  auto price = [&](const std::string& m) {
    auto it = cost_model.find(m);
    if (it == cost_model.end()) throw ContractViolation("model '" + m + "' has no price in the cost model");
    return it->second;
  };
  const double target_cost = price(trace.target);
  double total = 0.0;
  for (const auto& [m, n] : trace.calls_per_model) total += static_cast<double>(n) * price(m);
  require(total > 0.0, "trace has zero priced cost");
  return target_cost * static_cast<double>(trace.tokens_emitted) / total;
}

}  // namespace csd
