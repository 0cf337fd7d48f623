#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dflow/denoiser.hpp"

namespace dflow {

enum class Optimizer { Sgd, Momentum };

struct TrainConfig {
  double learning_rate = 0.05;
  // Linear decay: the step-k rate interpolates from learning_rate down to
  // learning_rate * final_lr_fraction at the last step.
  double final_lr_fraction = 1.0;
  int batch_size = 64;
  long steps = 10000;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::Momentum;
  double momentum = 0.9;
  double time_eps = kTimeEps;  // t ~ U[eps, 1-eps]
  // Optional 1/(1-t) loss weighting; exposed, off by default.
  bool weight_inv_one_minus_t = false;

  void validate() const;
};

// A batch of corruption draws: x1 ~ data, t ~ U[eps, 1-eps], xt ~ p_{t|1}.
struct CorruptedBatch {
  std::vector<TokenSequence> x1;
  std::vector<TokenSequence> xt;
  std::vector<double> t;
  std::vector<double> weight;  // per-sample loss weight, usually all 1
};

CorruptedBatch draw_corrupted_batch(const DataDistribution& dist,
                                    const ConditionalFlow& flow,
                                    const TrainConfig& cfg, int batch_size, Rng& rng);

// Small fully connected denoiser: per-dimension one-hot tokens concatenated
// with 8 sinusoidal time features, a shared trunk of tanh layers, and a
// D x S logit head. Parameters live in one flat vector so gradients can be
// checked against finite differences. predict() applies the configured
// logit temperature; training always runs at temperature 1.
class MlpDenoiser final : public Denoiser {
 public:
  MlpDenoiser(const Alphabet& alphabet, int dims, int hidden, std::uint64_t init_seed);

  DenoiserOutput predict(const TokenSequence& xt, double t) const override;
  int data_states() const override { return alphabet_.size_S; }

  // Raw logits (D x S), before temperature.
  std::vector<std::vector<double>> logits(const TokenSequence& xt, double t) const;

  // Mean cross-entropy over batch and dimensions; accumulates the analytic
  // gradient into grad (same layout as params) when grad != nullptr.
  double loss_and_grad(const CorruptedBatch& batch, std::vector<double>* grad) const;

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  double temperature() const { return temperature_; }
  void set_temperature(double temperature);

  const Alphabet& alphabet() const { return alphabet_; }
  int dims() const { return dims_; }
  int hidden() const { return hidden_; }

  nlohmann::json to_json(const std::string& config_hash = "") const;
  static MlpDenoiser from_json(const nlohmann::json& j);
  void save_file(const std::string& path, const std::string& config_hash = "") const;
  static MlpDenoiser load_file(const std::string& path);

 private:
  friend struct MlpWorkspace;
  int input_dim() const { return dims_ * alphabet_.num_states() + kTimeFeatures; }
  static constexpr int kTimeFeatures = 8;

  Alphabet alphabet_;
  int dims_;
  int hidden_;
  double temperature_ = 1.0;
  std::vector<double> params_;
  // Offsets into params_ for W0, b0, W1, b1, W2, b2, W3, b3.
  std::size_t off_[8] = {};
};

// Runs seeded SGD / momentum on the cross-entropy objective. Returns the
// per-step loss trace; the model is updated in place. Deterministic given
// cfg.seed. Throws TrainingDiverged on a non-finite loss.
std::vector<double> train(MlpDenoiser& mlp, const DataDistribution& dist,
                          const ConditionalFlow& flow, const TrainConfig& cfg);

// Monte-Carlo cross-entropy of an arbitrary denoiser under fresh corruption
// draws; value only, no gradient.
double ce_loss(const Denoiser& denoiser, const ConditionalFlow& flow,
               std::span<const TokenSequence> x1_batch, Rng& rng,
               double time_eps = kTimeEps);

}  // namespace dflow
