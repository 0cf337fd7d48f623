#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dflow/denoiser.hpp"
#include "dflow/mlp_denoiser.hpp"
#include "dflow/rate_matrix.hpp"
#include "dflow/sampler.hpp"

namespace dflow {

// State of the coupled continuous + token process. The two modalities run on
// independent clocks: t corrupts the coordinates, t_tilde the tokens.
struct JointState {
  std::vector<double> coords;
  TokenSequence tokens;
  double t = 0.0;
  double t_tilde = 0.0;
};

struct JointPrediction {
  std::vector<double> coords_hat;   // predicted clean coordinates
  DenoiserOutput token_probs;       // per-dimension clean-token distribution
};

class JointDenoiser {
 public:
  virtual ~JointDenoiser() = default;
  virtual JointPrediction predict(const JointState& state) const = 0;
  virtual int coord_dims() const = 0;
  virtual int token_dims() const = 0;
  virtual int data_states() const = 0;
};

// Paired coordinate/token dataset. Coordinates are expected in standardized
// form (zero mean, unit variance per column) before training or exact-head
// use; standardized() produces that form. Weights default to equal mass.
struct JointDataset {
  std::vector<std::vector<double>> coords;
  std::vector<TokenSequence> tokens;
  std::vector<double> weights;
  Alphabet alphabet;  // token alphabet with the mask enabled

  int size() const { return static_cast<int>(coords.size()); }
  int coord_dims() const { return coords.empty() ? 0 : static_cast<int>(coords[0].size()); }
  int token_dims() const { return tokens.empty() ? 0 : static_cast<int>(tokens[0].size()); }
  void validate() const;

  JointDataset standardized(std::vector<double>* mean_out = nullptr,
                            std::vector<double>* std_out = nullptr) const;

  // JSON schema: {"coords": [[float]], "tokens": [[int]], "S": int}.
  static JointDataset from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static JointDataset load_file(const std::string& path);
  void save_file(const std::string& path) const;
};

// Corrupts a clean pair: coordinates by the linear Gaussian interpolant
// x_t = t x1 + (1-t) x0 with x0 ~ N(0, I), tokens by masking at t_tilde.
JointState joint_corrupt(const std::vector<double>& x1_coords,
                         const TokenSequence& a1_tokens, const Alphabet& alphabet,
                         double t, double t_tilde, Rng& rng);

struct JointDynamics {
  std::vector<double> velocity;      // per coordinate, empty if coords fixed
  std::vector<RateRow> token_rows;   // per token dimension, empty if tokens fixed
};

// Velocity (x1_hat - x_t)/(1 - t) and per-dimension token rates (masking
// rate with optional stochasticity token_eta). Requesting movement for a
// modality whose clock sits at 1 is a mode error.
JointDynamics joint_velocity_and_rate(const JointDenoiser& denoiser,
                                      const JointState& state, double token_eta,
                                      bool move_coords = true, bool move_tokens = true);

// Exact posterior heads by enumeration over the dataset support: posterior
// mean for coordinates and per-dimension token posterior. Handles the
// boundary clocks (t or t_tilde equal to 1) by exact matching.
class ExactJointPosterior final : public JointDenoiser {
 public:
  explicit ExactJointPosterior(JointDataset dataset);
  JointPrediction predict(const JointState& state) const override;
  int coord_dims() const override { return dataset_.coord_dims(); }
  int token_dims() const override { return dataset_.token_dims(); }
  int data_states() const override { return dataset_.alphabet.size_S; }

 private:
  JointDataset dataset_;
};

// MLP with a shared trunk over coords ⊕ one-hot tokens ⊕ sinusoidal features
// of both clocks, a linear coordinate head and a token logit head. Flat
// parameter vector, hand-rolled backprop.
class JointMlpDenoiser final : public JointDenoiser {
 public:
  JointMlpDenoiser(const Alphabet& alphabet, int coord_dims, int token_dims,
                   int hidden, std::uint64_t init_seed);

  JointPrediction predict(const JointState& state) const override;
  int coord_dims() const override { return coord_dims_; }
  int token_dims() const override { return token_dims_; }
  int data_states() const override { return alphabet_.size_S; }

  struct Batch {
    std::vector<JointState> states;
    std::vector<std::vector<double>> x1_coords;
    std::vector<TokenSequence> a1_tokens;
  };

  // Squared-error coordinate term weighted by 1/(1-t) plus token
  // cross-entropy, averaged per modality over batch and dimensions. The
  // coordinate term is dropped on samples with t = 1 (the weight diverges
  // and the input is clean).
  double loss_and_grad(const Batch& batch, std::vector<double>* grad) const;

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  nlohmann::json to_json(const std::string& config_hash = "") const;
  static JointMlpDenoiser from_json(const nlohmann::json& j);

 private:
  int input_dim() const {
    return coord_dims_ + token_dims_ * alphabet_.num_states() + 2 * kTimeFeatures;
  }
  static constexpr int kTimeFeatures = 8;

  Alphabet alphabet_;
  int coord_dims_;
  int token_dims_;
  int hidden_;
  std::vector<double> params_;
  std::size_t off_[8] = {};  // W0 b0 W1 b1 Wc bc Wt bt
};

struct JointTrainConfig {
  double learning_rate = 0.01;
  int batch_size = 64;
  long steps = 5000;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::Momentum;
  double momentum = 0.9;
  double time_eps = kTimeEps;
  // The 1/(1-t) coordinate weight produces rare huge gradients near t = 1;
  // updates are clipped to this global L2 norm.
  double grad_clip = 10.0;
};

// One optimizer step: draws a batch, samples the clocks (10% t = 1,
// 10% t_tilde = 1, otherwise both uniform), corrupts, backpropagates and
// updates in place. Returns the batch loss.
double joint_train_step(JointMlpDenoiser& model, const JointDataset& dataset,
                        const JointTrainConfig& cfg, Rng& rng,
                        std::vector<double>& velocity);

std::vector<double> joint_train(JointMlpDenoiser& model, const JointDataset& dataset,
                                const JointTrainConfig& cfg);

enum class GenerationMode { CoGenerate, FixCoordsGenerateTokens, FixTokensGenerateCoords };

const char* to_string(GenerationMode mode);

struct JointSamplerConfig {
  double dt = 1e-3;
  double token_eta = 0.0;
  bool purity = false;  // only valid when tokens move
  double temperature = 1.0;
  FinalFill final_fill = FinalFill::Argmax;
  double t_start = kTimeEps;
  double t_end = 1.0 - kTimeEps;
};

struct JointSample {
  std::vector<double> coords;
  TokenSequence tokens;
};

// Samples the coupled process. CoGenerate advances both clocks together;
// the conditional modes pin one modality to its conditioning value with its
// clock at 1 and advance the other. Coordinates move by explicit Euler on
// the velocity, tokens by masking CTMC steps.
JointSample joint_generate(const JointDenoiser& denoiser, GenerationMode mode,
                           const JointSamplerConfig& cfg,
                           const std::optional<JointSample>& conditioning, Rng& rng);

std::vector<JointSample> joint_sample_batch(const JointDenoiser& denoiser,
                                            GenerationMode mode,
                                            const JointSamplerConfig& cfg,
                                            const std::optional<JointSample>& conditioning,
                                            long count, std::uint64_t seed,
                                            int threads = 0);

}  // namespace dflow
