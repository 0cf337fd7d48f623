#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dflow/alphabet.hpp"
#include "dflow/conditional_flow.hpp"
#include "dflow/data_distribution.hpp"

namespace dflow {

// Per-dimension clean-data probabilities p(x1^d = k | x_t, t). Rows cover the
// S data tokens only; the mask never receives mass.
struct DenoiserOutput {
  std::vector<std::vector<double>> probs;  // D rows of length S

  int dims() const { return static_cast<int>(probs.size()); }
  void check_normalized(double tol = 1e-9) const;
};

// Softmax of logits / temperature, rowwise.
std::vector<std::vector<double>> apply_temperature(
    const std::vector<std::vector<double>>& logits, double temperature);

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual DenoiserOutput predict(const TokenSequence& xt, double t) const = 0;
  virtual int data_states() const = 0;
};

// Exact Bayesian posterior over a tabular distribution:
//   p(x1 | x_t) ∝ p_data(x1) prod_d p_{t|1}(x_t^d | x1^d),
// reduced to per-dimension marginals. Throws UnreachableState when x_t has
// zero marginal mass under the flow.
class ExactPosteriorDenoiser final : public Denoiser {
 public:
  ExactPosteriorDenoiser(DataDistribution dist, ConditionalFlow flow);
  DenoiserOutput predict(const TokenSequence& xt, double t) const override;
  int data_states() const override { return dist_.alphabet().size_S; }

  const DataDistribution& distribution() const { return dist_; }
  const ConditionalFlow& flow() const { return flow_; }

 private:
  DataDistribution dist_;
  ConditionalFlow flow_;
};

// Arbitrary prediction rule; used by tests and for perturbed baselines.
class FunctionDenoiser final : public Denoiser {
 public:
  using Fn = std::function<DenoiserOutput(const TokenSequence&, double)>;
  FunctionDenoiser(int data_states, Fn fn) : s_(data_states), fn_(std::move(fn)) {}
  DenoiserOutput predict(const TokenSequence& xt, double t) const override {
    return fn_(xt, t);
  }
  int data_states() const override { return s_; }

 private:
  int s_;
  Fn fn_;
};

// Applies softmax(log p / temperature) on top of another denoiser; zero-mass
// entries stay at zero. temperature == 1 passes rows through untouched.
class TemperatureDenoiser final : public Denoiser {
 public:
  TemperatureDenoiser(std::shared_ptr<const Denoiser> base, double temperature);
  DenoiserOutput predict(const TokenSequence& xt, double t) const override;
  int data_states() const override { return base_->data_states(); }

 private:
  std::shared_ptr<const Denoiser> base_;
  double temperature_;
};

// Base denoiser evaluated once for every state of an enumerable space on a
// fixed time grid, then served lock-free. Sampling loops revisit the same
// (state, t) pairs for every trajectory, so this turns the exact posterior
// from the dominant cost into a table lookup. States that are unreachable
// under the flow are marked and rejected on access.
class TabulatedDenoiser final : public Denoiser {
 public:
  TabulatedDenoiser(const Denoiser& base, const Alphabet& alphabet, int dims,
                    std::vector<double> time_grid);
  DenoiserOutput predict(const TokenSequence& xt, double t) const override;
  int data_states() const override { return s_; }

 private:
  Alphabet alphabet_;
  int dims_;
  int s_;
  std::vector<double> time_grid_;
  // [time][state] -> flattened D*S probabilities; empty row = unreachable.
  std::vector<std::vector<std::vector<double>>> table_;
};

}  // namespace dflow
