#pragma once

// Shared toys and independent oracles for the test suites. Oracle code here
// deliberately avoids the library's rate/sampling paths wherever it is used
// to check them.

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "dflow/data_distribution.hpp"
#include "dflow/denoiser.hpp"
#include "dflow/rate_matrix.hpp"

namespace dflow::testing {

// S=2, D=1, p = (0.75, 0.25).
inline DataDistribution bernoulli75(bool mask_enabled = false) {
  Alphabet alphabet(2, mask_enabled);
  return DataDistribution::tabular(alphabet, 1, {{{0}, 0.75}, {{1}, 0.25}});
}

// S=2, D=2 correlated toy: matching bits likely.
inline DataDistribution correlated_pairs(bool mask_enabled = false) {
  Alphabet alphabet(2, mask_enabled);
  return DataDistribution::tabular(
      alphabet, 2, {{{0, 0}, 0.4}, {{1, 1}, 0.4}, {{0, 1}, 0.1}, {{1, 0}, 0.1}});
}

inline DataDistribution point_mass(const Alphabet& alphabet, TokenSequence point) {
  const int dims = static_cast<int>(point.size());
  return DataDistribution::tabular(alphabet, dims, {{std::move(point), 1.0}});
}

// Structured S=4, D=3 toy: first-order chain with peaked transitions. The
// mass is concentrated enough that 5e4 samples resolve the table well.
inline DataDistribution structured_toy(bool mask_enabled) {
  Alphabet alphabet(4, mask_enabled);
  const std::vector<double> init = {0.4, 0.3, 0.2, 0.1};
  const auto trans = [](Token a, Token b) {
    if (a == b) return 0.55;
    if (b == (a + 1) % 4) return 0.35;
    return 0.05;
  };
  std::vector<WeightedSequence> entries;
  for (Token a = 0; a < 4; ++a)
    for (Token b = 0; b < 4; ++b)
      for (Token c = 0; c < 4; ++c)
        entries.push_back({{a, b, c},
                           init[static_cast<std::size_t>(a)] * trans(a, b) * trans(b, c)});
  return DataDistribution::tabular(alphabet, 3, std::move(entries));
}

// Uniform distribution over even-parity bit strings of length dims.
inline DataDistribution parity_toy(int dims, bool mask_enabled = false) {
  Alphabet alphabet(2, mask_enabled);
  std::vector<WeightedSequence> entries;
  const std::size_t total = state_space_size(dims, 2);
  for (std::size_t idx = 0; idx < total; ++idx) {
    TokenSequence seq = decode_state(idx, dims, 2);
    if (std::accumulate(seq.begin(), seq.end(), 0) % 2 == 0)
      entries.push_back({std::move(seq), 0.0});
  }
  for (auto& entry : entries) entry.p = 1.0 / static_cast<double>(entries.size());
  return DataDistribution::tabular(alphabet, dims, std::move(entries));
}

// Explicit RK4 on dp/dt = R(t)^T p with rows built per state from row_fn.
// Independent of the library's Kolmogorov residual path.
inline std::vector<double> rk4_forward(
    const std::function<RateRow(double, Token)>& row_fn, std::vector<double> p,
    double t0, double t1, double step) {
  const int n = static_cast<int>(p.size());
  const auto derivative = [&](double t, const std::vector<double>& state) {
    std::vector<double> d(state.size(), 0.0);
    for (Token i = 0; i < n; ++i) {
      const RateRow row = row_fn(t, i);
      for (int j = 0; j < n; ++j)
        d[static_cast<std::size_t>(j)] +=
            row.rates[static_cast<std::size_t>(j)] * state[static_cast<std::size_t>(i)];
    }
    return d;
  };
  const long n_steps = std::lround((t1 - t0) / step);
  const double h = (t1 - t0) / static_cast<double>(n_steps);
  double t = t0;
  std::vector<double> k1, k2, k3, k4, tmp(p.size());
  for (long s = 0; s < n_steps; ++s) {
    k1 = derivative(t, p);
    for (std::size_t i = 0; i < p.size(); ++i) tmp[i] = p[i] + 0.5 * h * k1[i];
    k2 = derivative(t + 0.5 * h, tmp);
    for (std::size_t i = 0; i < p.size(); ++i) tmp[i] = p[i] + 0.5 * h * k2[i];
    k3 = derivative(t + 0.5 * h, tmp);
    for (std::size_t i = 0; i < p.size(); ++i) tmp[i] = p[i] + h * k3[i];
    k4 = derivative(t + h, tmp);
    for (std::size_t i = 0; i < p.size(); ++i)
      p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    t += h;
  }
  return p;
}

struct MeanVar {
  double mean = 0.0;
  double variance = 0.0;
  double se_mean = 0.0;
};

inline MeanVar mean_var(std::span<const double> values) {
  MeanVar mv;
  const double n = static_cast<double>(values.size());
  for (double v : values) mv.mean += v / n;
  for (double v : values) mv.variance += (v - mv.mean) * (v - mv.mean) / n;
  mv.se_mean = std::sqrt(mv.variance / n);
  return mv;
}

}  // namespace dflow::testing
