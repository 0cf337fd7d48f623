#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dflow/alphabet.hpp"
#include "dflow/conditional_flow.hpp"
#include "dflow/rng.hpp"

namespace dflow {

struct WeightedSequence {
  TokenSequence tokens;
  double p = 0.0;
};

// Clean-data distribution over mask-free sequences. Tabular distributions
// (explicit support) are the canonical form and enable the exact enumeration
// oracles; sampler-backed distributions only support drawing.
class DataDistribution {
 public:
  using SamplerFn = std::function<TokenSequence(Rng&)>;

  static DataDistribution tabular(const Alphabet& alphabet, int dims,
                                  std::vector<WeightedSequence> entries);
  static DataDistribution from_sampler(const Alphabet& alphabet, int dims,
                                       SamplerFn sampler);
  // Equal-mass table built from observed samples (duplicates merge).
  static DataDistribution empirical(const Alphabet& alphabet, int dims,
                                    std::span<const TokenSequence> samples);

  bool is_tabular() const { return sampler_ == nullptr; }
  int dims() const { return dims_; }
  const Alphabet& alphabet() const { return alphabet_; }
  const std::vector<WeightedSequence>& support() const;

  TokenSequence sample(Rng& rng) const;

  // Full probability table over all num_states()^D states at time t:
  // p_t(x) = sum_{x1} p_data(x1) prod_d p_{t|1}(x^d | x1^d).
  // Guarded to at most 10^7 states.
  std::vector<double> marginal_pt(const ConditionalFlow& flow, double t) const;

  // Exact data table over all states (marginal_pt at t=1 without a flow).
  std::vector<double> state_table() const;

  // Marginal of dimension d over data tokens.
  std::vector<double> dim_marginal(int dim) const;

  // JSON schema: {"S": int, "D": int, "entries": [{"tokens": [...], "p": ...}]}.
  static DataDistribution from_json(const nlohmann::json& j, bool mask_enabled);
  nlohmann::json to_json() const;
  static DataDistribution load_file(const std::string& path, bool mask_enabled);
  void save_file(const std::string& path) const;

 private:
  DataDistribution() = default;

  Alphabet alphabet_;
  int dims_ = 0;
  std::vector<WeightedSequence> entries_;
  SamplerFn sampler_;
};

}  // namespace dflow
