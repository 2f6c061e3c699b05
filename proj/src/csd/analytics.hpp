#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "csd/cascade.hpp"
#include "csd/core.hpp"

namespace csd {

// Probability generating function of the tokens produced by one speculative
// step with acceptance rate alpha and k drafted tokens.
double gen_fn(double alpha, std::size_t k, double x);
// Coefficients c[j] of x^j, j = 0..k+1.
std::vector<double> gen_fn_coefficients(double alpha, std::size_t k);

std::vector<double> poly_multiply(std::span<const double> a, std::span<const double> b);
std::vector<double> poly_power(std::span<const double> coeffs, std::size_t n);
double poly_eval(std::span<const double> coeffs, double x);

// Expected walltime improvement factors under i.i.d. token acceptance.
double sd_ewif(double alpha, double c, std::size_t k);
double vertical_ewif(double alpha, double alpha_prime, std::size_t k, std::size_t n, double c1, double c2);

struct AcceptanceProfile {
  std::vector<double> alphas;  // per drafted position, each in [0, 1]
  std::vector<double> costs;   // per drafted position, each >= 0

  std::size_t size() const { return alphas.size(); }
  void validate() const;
  // k1 positions of the first draft followed by k2 of the second, etc.
  static AcceptanceProfile from_split(std::span<const double> alphas, std::span<const double> costs,
                                      std::span<const std::size_t> counts);
};

double horizontal_ewif(const AcceptanceProfile& profile);
// Derivative with respect to alphas[l - 1]; l is 1-based.
double horizontal_ewif_grad(const AcceptanceProfile& profile, std::size_t l);
// Probability that drafted position i (1-based) is accepted: prod_{j<=i} alpha_j.
double position_acceptance(const AcceptanceProfile& profile, std::size_t i);

// (1 - alpha f(alpha)) / (1 - alpha): expected tokens produced when a
// reviewer with acceptance rate alpha checks a draft whose length has
// generating polynomial f.
double t_alpha_expectation(std::span<const double> coeffs, double alpha);

struct EwifEstimate {
  double mean = 0.0;
  double ci95 = 0.0;  // normal-approximation half-width
  std::size_t trials = 0;
};

struct SdSpec {
  double alpha = 0.0;
  double c = 0.0;
  std::size_t k = 1;
};

struct VerticalSpec {
  double alpha = 0.0;
  double alpha_prime = 0.0;
  std::size_t k = 1;
  std::size_t n = 1;
  double c1 = 0.0;
  double c2 = 0.0;
};

using SimulationSpec = std::variant<SdSpec, VerticalSpec, AcceptanceProfile>;

double closed_form_ewif(const SimulationSpec& spec);

// Bernoulli simulation of one review per trial. Trials are split over a
// fixed number of shards seeded with RandomSource::split(seed, shard), so the
// estimate does not depend on how many threads run them.
EwifEstimate simulate_ewif(const SimulationSpec& spec, std::size_t trials, std::uint64_t seed);

struct SyntheticPair {
  ModelPtr target;
  ModelPtr draft;
};

// Context-free target/draft models whose acceptance probability is `alpha`:
// the draft moves 1 - alpha of mass from the target's argmax token to the
// lowest other token id.
SyntheticPair synthetic_pair(const Distribution& base, double alpha, double target_cost = 1.0,
                             double draft_cost = 0.0);

// Standardized walltime improvement: cost of target-only autoregressive
// generation of the same tokens over the priced cost of the trace.
double swi(const GenerationTrace& trace, const std::map<std::string, double>& cost_model);

}  // namespace csd
