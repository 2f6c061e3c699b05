#pragma once

#include <atomic>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "csd/core.hpp"

namespace testing {

// Random strictly positive distribution over v tokens.
inline csd::Distribution random_dist(std::size_t v, csd::RandomSource& rng, double floor = 0.0) {
  std::vector<double> w(v);
  for (auto& x : w) x = floor + rng.uniform();
  return csd::normalize(w);
}

// Distribution with a random sparse support (some exact zeros).
inline csd::Distribution random_sparse_dist(std::size_t v, csd::RandomSource& rng) {
  std::vector<double> w(v, 0.0);
  w[rng.next_u64() % v] = 0.1 + rng.uniform();
  for (auto& x : w)
    if (rng.uniform() < 0.5) x += rng.uniform();
  return csd::normalize(w);
}

// First-order Markov model with random rows.
inline std::shared_ptr<csd::MarkovModel> random_markov(const std::string& name, std::size_t v, csd::RandomSource& rng,
                                                       double cost = 1.0, double floor = 0.0) {
  std::vector<csd::Distribution> rows;
  for (std::size_t i = 0; i < v; ++i) rows.push_back(random_dist(v, rng, floor));
  return std::make_shared<csd::MarkovModel>(name, random_dist(v, rng, floor), std::move(rows), cost);
}

// Peaked rows: one token holds roughly `peak` of the mass.
inline std::shared_ptr<csd::MarkovModel> peaked_markov(const std::string& name, std::size_t v, csd::RandomSource& rng,
                                                       double peak, double cost = 1.0) {
  auto row = [&] {
    std::vector<double> w(v);
    for (auto& x : w) x = 0.2 + rng.uniform();
    double rest = 0.0;
    for (double x : w) rest += x;
    const std::size_t top = rng.next_u64() % v;
    for (auto& x : w) x *= (1.0 - peak) / rest;
    w[top] += peak;
    return csd::normalize(w);
  };
  std::vector<csd::Distribution> rows;
  for (std::size_t i = 0; i < v; ++i) rows.push_back(row());
  return std::make_shared<csd::MarkovModel>(name, row(), std::move(rows), cost);
}

// Wraps a model and counts evaluate calls.
class CountingModel final : public csd::LanguageModel {
 public:
  explicit CountingModel(csd::ModelPtr inner) : inner_(std::move(inner)) {}
  const csd::Vocab& vocab() const override { return inner_->vocab(); }
  double cost_weight() const override { return inner_->cost_weight(); }
  std::string descriptor() const override { return inner_->descriptor(); }
  std::size_t block_span() const override { return inner_->block_span(); }
  std::size_t calls() const { return calls_.load(); }

 protected:
  std::vector<csd::Distribution> do_evaluate(std::span<const csd::TokenId> tokens, std::size_t start) const override {
    ++calls_;
    return inner_->evaluate(tokens, start);
  }

 private:
  csd::ModelPtr inner_;
  mutable std::atomic<std::size_t> calls_{0};
};

inline double total_variation(const std::map<std::vector<csd::TokenId>, double>& a,
                              const std::map<std::vector<csd::TokenId>, double>& b) {
  std::map<std::vector<csd::TokenId>, std::pair<double, double>> joint;
  for (const auto& [k, v] : a) joint[k].first = v;
  for (const auto& [k, v] : b) joint[k].second = v;
  double tv = 0.0;
  for (const auto& [k, v] : joint) tv += std::abs(v.first - v.second);
  return tv / 2.0;
}

}  // namespace testing
