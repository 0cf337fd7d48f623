#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dflow/denoiser.hpp"
#include "dflow/rate_matrix.hpp"
#include "dflow/sampler.hpp"

namespace dflow {

struct MetricValue {
  double value = 0.0;
  double stderr_ = std::numeric_limits<double>::quiet_NaN();
  long n = 0;
};

struct EvalReport {
  std::map<std::string, MetricValue> metrics;
  std::uint64_t seed = 0;
  std::string config_hash;
  long sample_count = 0;

  void set(const std::string& name, double value,
           double stderr_ = std::numeric_limits<double>::quiet_NaN(), long n = 0);
  nlohmann::json to_json() const;
  std::string to_csv() const;  // one metric per row: name,value,stderr,n
  void save(const std::string& json_path, const std::string& csv_path) const;
};

// Half L1 distance between two distributions on the same space.
double tv_distance(std::span<const double> p, std::span<const double> q);

// Empirical distribution of sequences over the full mixed-radix state space.
std::vector<double> state_histogram(std::span<const TokenSequence> samples,
                                    int dims, int num_states);

// Empirical token-frequency entropy in bits; zero-frequency terms omitted.
double sample_entropy(std::span<const TokenSequence> samples);

struct ElboEstimate {
  double bits_per_token = 0.0;  // negated bound
  double stderr_ = 0.0;
  long n = 0;
};

// Monte-Carlo estimate of the masking likelihood bound
//   E[ sum_d 1{x_t^d = M} (1/(1-t)) log p_theta(x1^d | x_t) ]
// over t ~ U[eps, 1-eps], x1 ~ dist, x_t ~ p_{t|1}; reported negated in bits
// per token with its standard error. Requires a masking flow.
ElboEstimate masking_elbo(const Denoiser& denoiser, const DataDistribution& dist,
                          const ConditionalFlow& flow, long mc_samples, Rng& rng,
                          double time_eps = kTimeEps);

struct JumpStats {
  double mean = 0.0;
  double variance = 0.0;
  std::vector<double> per_dim_mean;
  std::map<long, long> count_histogram;
};

JumpStats jump_stats(std::span<const Trajectory> trajectories);
JumpStats jump_stats(std::span<const long> total_jumps);

// Compares the absorbing-state discrete-time reverse kernel under the linear
// schedule beta_k = 1/(T - k + 1) at step index t_index against the masking
// one-step kernel at time 1 - t_index/T with dt = 1/T and eta = 0, sharing
// the denoiser row. Returns the max-abs entry discrepancy across masked and
// unmasked source rows.
double d3pm_equivalence_check(int T, int t_index,
                              std::span<const double> denoiser_row);

// Max over the grid and states of | d/dt p_{t|1} - R_t^T p_{t|1} | for the
// plan's conditional rate; zero (to rounding) when the rate generates the
// flow.
double kolmogorov_residual(const RatePlan& plan, Token x1_tok,
                           std::span<const double> t_grid);

// Reverse-rate construction of a continuous-time discrete diffusion with
// uniform corruption at S = 3 (schedule beta(t) = 1/(3t)), compared entrywise
// against the minimal-jump rate plus the matching detailed-balance rate
// (b_t = c_t = 1/(3t)). Returns the max-abs discrepancy over a time grid and
// all conditioning tokens.
double diffusion_reverse_rate_discrepancy(std::span<const double> t_grid);

}  // namespace dflow
