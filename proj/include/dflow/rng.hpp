#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "dflow/error.hpp"

namespace dflow {

// splitmix64; used both to expand seeds and to derive substream seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Seeded wrapper around mt19937_64. All randomness in the library flows
// through one of these; substreams are derived from (seed, stream index)
// so that parallel trajectories are reproducible regardless of scheduling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    gen_.seed(splitmix64(s));
  }

  // Substream k of a root seed. Mixing the index through splitmix64 keeps
  // neighbouring streams decorrelated.
  static Rng substream(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed + 0x632be59bd9b4e019ULL * (stream + 1);
    return Rng(splitmix64(s));
  }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(gen_);
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    return std::uniform_int_distribution<int>(0, n - 1)(gen_);
  }

  double normal() { return normal_(gen_); }

  // Index drawn proportionally to weights (not required to be normalized).
  // Weights must be non-negative with a positive sum.
  int categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) fail(ErrorCode::BadInput, "categorical: weights sum to zero");
    double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size() - 1);
  }

  long binomial(long trials, double p) {
    if (trials <= 0 || p <= 0.0) return 0;
    if (p >= 1.0) return trials;
    return std::binomial_distribution<long>(trials, p)(gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace dflow
