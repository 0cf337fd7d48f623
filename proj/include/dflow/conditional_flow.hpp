#pragma once

#include <functional>
#include <vector>

#include "dflow/alphabet.hpp"
#include "dflow/rng.hpp"

namespace dflow {

enum class FlowKind { Masking, Uniform, GeneralTabular };

const char* to_string(FlowKind kind);

// Per-dimension conditional interpolation p_{t|1}(x_t | x_1) from a noise
// prior at t=0 to a point mass on x_1 at t=1, together with its time
// derivative. Masking and Uniform are the closed-form linear interpolants;
// GeneralTabular wraps a user schedule (probability row per (t, x_1)) with
// an optional analytic derivative rule. Immutable after construction.
class ConditionalFlow {
 public:
  // Row of probabilities over all alphabet states for a given (t, x1).
  using ScheduleFn = std::function<std::vector<double>(double t, Token x1)>;

  static ConditionalFlow masking(const Alphabet& alphabet);
  static ConditionalFlow uniform(const Alphabet& alphabet);
  // Validates the schedule on a time grid: rows normalized within 1e-12,
  // non-negative, boundary behaviour at t in {eps, 1-eps}, x1-independent
  // prior at t=0, zero mass on the mask when the alphabet has none, and the
  // dead-state condition p=0 => dp/dt=0. Throws InvalidSchedule otherwise.
  static ConditionalFlow general(const Alphabet& alphabet, ScheduleFn schedule,
                                 ScheduleFn schedule_dt = nullptr);

  FlowKind kind() const { return kind_; }
  const Alphabet& alphabet() const { return alphabet_; }

  // p_{t|1}(xt | x1); defined on all of t in [0, 1].
  double prob(double t, Token x1, Token xt) const;
  // d/dt p_{t|1}(xt | x1). GeneralTabular without an analytic rule uses a
  // central finite difference with h = 1e-6.
  double prob_dt(double t, Token x1, Token xt) const;

  std::vector<double> prob_row(double t, Token x1) const;
  std::vector<double> prob_dt_row(double t, Token x1) const;

  // Noise prior p_{0|1}; independent of x1 by construction.
  std::vector<double> prior_row() const;

  // Draws each dimension independently from p_{t|1}(. | x1^d). x1 must be
  // mask-free.
  TokenSequence sample_corrupted(double t, const TokenSequence& x1, Rng& rng) const;

  // Draws a D-dimensional sample from the noise prior.
  TokenSequence sample_prior(int dims, Rng& rng) const;

 private:
  ConditionalFlow(FlowKind kind, Alphabet alphabet, ScheduleFn schedule,
                  ScheduleFn schedule_dt);
  void validate_schedule() const;

  FlowKind kind_;
  Alphabet alphabet_;
  ScheduleFn schedule_;
  ScheduleFn schedule_dt_;
};

}  // namespace dflow
