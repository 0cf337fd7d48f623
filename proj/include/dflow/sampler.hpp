#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dflow/denoiser.hpp"
#include "dflow/rate_matrix.hpp"
#include "dflow/rng.hpp"

namespace dflow {

enum class Scheme { FactorizedEuler, SampleThenPlug, MaskingFast, MaskingPurity };
enum class FinalFill { None, Argmax, Sample };

const char* to_string(Scheme scheme);

struct SamplerConfig {
  double dt = 1e-3;
  double eta = 0.0;  // recorded here; the RatePlan's eta is what is simulated
  Scheme scheme = Scheme::FactorizedEuler;
  double temperature = 1.0;
  FinalFill final_fill = FinalFill::Argmax;
  std::uint64_t seed = 0;
  double t_start = kTimeEps;
  double t_end = 1.0 - kTimeEps;

  void validate() const;
};

struct JumpRecord {
  double t = 0.0;
  int dim = 0;
  Token from = 0;
  Token to = 0;
};

// One simulated path. The CTMC changes one dimension per jump; when a
// factorized Euler step flips several dimensions at once the flips are
// serialized inside the step at evenly spaced sub-times, ascending dimension
// order, so times stay strictly increasing. Mask tokens resolved by the
// final fill are recorded as jumps in (t_end, 1).
struct Trajectory {
  TokenSequence initial_state;
  std::vector<JumpRecord> jumps;
  std::vector<double> times;          // jump times, strictly increasing
  std::vector<TokenSequence> states;  // state after each jump
  std::vector<int> jump_count_per_dim;

  long total_jumps() const { return static_cast<long>(jumps.size()); }
};

// Categorical one-step kernel delta + R*dt for a single dimension, with the
// off-diagonal entries capped at 1 and the diagonal floored at 0. The row is
// renormalized when drawn.
std::vector<double> euler_step_probs(const RateRow& row, double dt);

// One factorized Euler step: every dimension independently draws its next
// token from Cat(delta + R_t(x_t, .) dt) under the denoiser expectation rate.
TokenSequence euler_step(const RatePlan& plan, const Denoiser& denoiser, double t,
                         const TokenSequence& xt, double dt, Rng& rng);

// Draws x1 ~ denoiser per dimension and steps with the rate conditioned on
// that sample; equal in law to euler_step.
TokenSequence sample_then_plug_step(const RatePlan& plan, const Denoiser& denoiser,
                                    double t, const TokenSequence& xt, double dt,
                                    Rng& rng);

// Masking-only shortcut: masked dimensions unmask with probability
// dt (1 + eta t)/(1 - t) to a token drawn from the denoiser; dimensions that
// were unmasked at the start of the step remask with probability dt * eta,
// never on the final step (t + dt >= 1).
TokenSequence masking_fast_step(const RatePlan& plan, const Denoiser& denoiser,
                                double t, const TokenSequence& xt, double dt,
                                Rng& rng);

// Masking-only: ranks masked dimensions by purity (the denoiser's top token
// probability), draws how many to unmask from a binomial, unmasks the
// highest-purity dimensions first (ties by index), then applies remasking to
// dimensions that entered the step unmasked.
TokenSequence purity_step(const RatePlan& plan, const Denoiser& denoiser, double t,
                          const TokenSequence& xt, double dt, Rng& rng);

struct GenerateResult {
  TokenSequence sample;
  Trajectory trajectory;
};

// Simulates one trajectory from the flow prior at t_start to t_end with the
// configured scheme, then resolves residual masks by final_fill. The output
// is mask-free; FinalFill::None with masks left raises IncompleteSample.
// cfg.temperature wraps the denoiser; deterministic given rng state.
GenerateResult generate(const RatePlan& plan, const Denoiser& denoiser, int dims,
                        const SamplerConfig& cfg, Rng& rng);

struct BatchOptions {
  long count = 0;
  std::uint64_t seed = 0;
  int threads = 0;             // 0 = hardware concurrency
  double snapshot_time = -1.0; // capture states at this time when >= 0
};

struct BatchResult {
  std::vector<TokenSequence> samples;
  std::vector<long> jumps;             // total jumps per trajectory
  std::vector<TokenSequence> snapshots;
};

// Runs `count` independent trajectories, one RNG substream per trajectory
// index, fanned out over a thread pool. Results are identical for any thread
// count.
BatchResult sample_batch(const RatePlan& plan, const Denoiser& denoiser, int dims,
                         const SamplerConfig& cfg, const BatchOptions& options);

// Factorized-Euler step kernels precomputed for every (time step, state,
// dimension) of an enumerable state space. Batch sampling against the table
// follows the same law as the generic FactorizedEuler path but costs one
// lookup per dimension per step, which is what makes the 5e4-trajectory
// oracle comparisons affordable. States the denoiser rejects as unreachable
// are marked and refused if a trajectory ever lands on one.
class EulerKernelTable {
 public:
  EulerKernelTable(const RatePlan& plan, const Denoiser& denoiser, int dims,
                   const SamplerConfig& cfg);

  // Step kernel over destination tokens for one dimension (plain
  // probabilities, not cumulative); step_index indexes the time grid.
  std::vector<double> step_row(long step_index, const TokenSequence& state,
                               int dim) const;

  long steps() const { return n_steps_; }
  double dt() const { return dt_; }  // requested dt snapped to the grid
  double time_at(long step_index) const {
    return t_start_ + dt_ * static_cast<double>(step_index);
  }

  BatchResult sample(const BatchOptions& options) const;

 private:
  std::size_t kernel_offset(long step, std::size_t state, int dim) const {
    return ((static_cast<std::size_t>(step) * n_states_ + state) * dims_ + static_cast<std::size_t>(dim)) *
           tokens_;
  }

  Alphabet alphabet_;
  int dims_;
  std::size_t n_states_;
  std::size_t tokens_;
  long n_steps_;
  double dt_;
  double t_start_;
  double t_end_;
  FinalFill final_fill_;
  bool masking_ = false;
  std::vector<double> prior_;            // per-dim prior over tokens
  std::vector<double> cumulative_;       // [step][state][dim][token], cumulative
  std::vector<double> fill_;             // [state][dim][S] denoiser rows at t_end
  std::vector<std::uint8_t> reachable_;  // per state
};

}  // namespace dflow
