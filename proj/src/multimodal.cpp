#include "dflow/multimodal.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <thread>

namespace dflow {

namespace {
constexpr double kClockOne = 1.0 - 1e-12;

void joint_time_features(double t, double* out) {
  for (int k = 0; k < 4; ++k) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(1 << k);
    out[2 * k] = std::sin(w * t);
    out[2 * k + 1] = std::cos(w * t);
  }
}
}  // namespace

const char* to_string(GenerationMode mode) {
  switch (mode) {
    case GenerationMode::CoGenerate: return "co_generate";
    case GenerationMode::FixCoordsGenerateTokens: return "fix_coords_generate_tokens";
    case GenerationMode::FixTokensGenerateCoords: return "fix_tokens_generate_coords";
  }
  return "?";
}

void JointDataset::validate() const {
  if (coords.empty() || coords.size() != tokens.size())
    fail(ErrorCode::BadInput, "joint dataset shape mismatch");
  if (!weights.empty() && weights.size() != coords.size())
    fail(ErrorCode::BadInput, "joint dataset weight count mismatch");
  if (!alphabet.mask_enabled)
    fail(ErrorCode::InvalidAlphabet, "joint token alphabet needs a mask symbol");
  const std::size_t dc = coords[0].size();
  const std::size_t da = tokens[0].size();
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (coords[i].size() != dc || tokens[i].size() != da)
      fail(ErrorCode::BadInput, "ragged joint dataset");
    for (double v : coords[i])
      if (!std::isfinite(v)) fail(ErrorCode::BadInput, "non-finite coordinate");
    alphabet.check_sequence(tokens[i], /*allow_mask=*/false);
  }
}

JointDataset JointDataset::standardized(std::vector<double>* mean_out,
                                        std::vector<double>* std_out) const {
  validate();
  const int dc = coord_dims();
  const double n = static_cast<double>(size());
  std::vector<double> mean(static_cast<std::size_t>(dc), 0.0);
  std::vector<double> sd(static_cast<std::size_t>(dc), 0.0);
  for (const auto& row : coords)
    for (int c = 0; c < dc; ++c) mean[static_cast<std::size_t>(c)] += row[static_cast<std::size_t>(c)] / n;
  for (const auto& row : coords)
    for (int c = 0; c < dc; ++c) {
      const double d = row[static_cast<std::size_t>(c)] - mean[static_cast<std::size_t>(c)];
      sd[static_cast<std::size_t>(c)] += d * d / n;
    }
  for (double& v : sd) v = std::sqrt(std::max(v, 1e-12));

  JointDataset out = *this;
  for (auto& row : out.coords)
    for (int c = 0; c < dc; ++c)
      row[static_cast<std::size_t>(c)] =
          (row[static_cast<std::size_t>(c)] - mean[static_cast<std::size_t>(c)]) /
          sd[static_cast<std::size_t>(c)];
  if (mean_out) *mean_out = std::move(mean);
  if (std_out) *std_out = std::move(sd);
  return out;
}

JointDataset JointDataset::from_json(const nlohmann::json& j) {
  JointDataset ds;
  ds.coords = j.at("coords").get<std::vector<std::vector<double>>>();
  ds.tokens = j.at("tokens").get<std::vector<TokenSequence>>();
  ds.alphabet = Alphabet(j.at("S").get<int>(), /*mask=*/true);
  ds.validate();
  return ds;
}

nlohmann::json JointDataset::to_json() const {
  return {{"coords", coords}, {"tokens", tokens}, {"S", alphabet.size_S}};
}

JointDataset JointDataset::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::BadInput, "cannot open " + path);
  nlohmann::json j;
  in >> j;
  return from_json(j);
}

void JointDataset::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::BadInput, "cannot write " + path);
  out << to_json().dump(2) << "\n";
}

JointState joint_corrupt(const std::vector<double>& x1_coords,
                         const TokenSequence& a1_tokens, const Alphabet& alphabet,
                         double t, double t_tilde, Rng& rng) {
  alphabet.check_sequence(a1_tokens, /*allow_mask=*/false);
  if (!(t >= 0.0 && t <= 1.0 && t_tilde >= 0.0 && t_tilde <= 1.0))
    fail(ErrorCode::TimeDomain, "clock outside [0, 1]");
  JointState state;
  state.t = t;
  state.t_tilde = t_tilde;
  state.coords.resize(x1_coords.size());
  for (std::size_t c = 0; c < x1_coords.size(); ++c)
    state.coords[c] = t * x1_coords[c] + (1.0 - t) * rng.normal();
  const Token mask = alphabet.mask_code();
  state.tokens.resize(a1_tokens.size());
  for (std::size_t d = 0; d < a1_tokens.size(); ++d)
    state.tokens[d] = rng.uniform() < t_tilde ? a1_tokens[d] : mask;
  return state;
}

JointDynamics joint_velocity_and_rate(const JointDenoiser& denoiser,
                                      const JointState& state, double token_eta,
                                      bool move_coords, bool move_tokens) {
  JointDynamics dyn;
  const JointPrediction pred = denoiser.predict(state);
  if (move_coords) {
    if (state.t >= kClockOne)
      fail(ErrorCode::ModeError, "coordinate clock at 1; coordinates are fixed");
    dyn.velocity.resize(state.coords.size());
    for (std::size_t c = 0; c < state.coords.size(); ++c)
      dyn.velocity[c] = (pred.coords_hat[c] - state.coords[c]) / (1.0 - state.t);
  }
  if (move_tokens) {
    if (state.t_tilde >= kClockOne)
      fail(ErrorCode::ModeError, "token clock at 1; tokens are fixed");
    Alphabet alphabet(denoiser.data_states(), /*mask=*/true);
    const ConditionalFlow flow = ConditionalFlow::masking(alphabet);
    const RatePlan plan(flow, token_eta,
                        token_eta > 0.0 ? DbKind::Canonical : DbKind::None);
    dyn.token_rows.reserve(state.tokens.size());
    for (int d = 0; d < static_cast<int>(state.tokens.size()); ++d)
      dyn.token_rows.push_back(unconditional_rate_row(plan, pred.token_probs,
                                                      state.t_tilde, state.tokens, d));
  }
  return dyn;
}

ExactJointPosterior::ExactJointPosterior(JointDataset dataset)
    : dataset_(std::move(dataset)) {
  dataset_.validate();
  if (dataset_.weights.empty())
    dataset_.weights.assign(static_cast<std::size_t>(dataset_.size()),
                            1.0 / dataset_.size());
}

JointPrediction ExactJointPosterior::predict(const JointState& state) const {
  const int n = dataset_.size();
  const int dc = dataset_.coord_dims();
  const int da = dataset_.token_dims();
  const int s = dataset_.alphabet.size_S;
  const Token mask = dataset_.alphabet.mask_code();
  const double t = state.t;
  const double tt = state.t_tilde;

  std::vector<double> logw(static_cast<std::size_t>(n),
                           -std::numeric_limits<double>::infinity());
  const bool coords_exact = t >= kClockOne;
  const double sigma = 1.0 - t;
  for (int i = 0; i < n; ++i) {
    const auto& x1 = dataset_.coords[static_cast<std::size_t>(i)];
    const auto& a1 = dataset_.tokens[static_cast<std::size_t>(i)];
    double lw = std::log(dataset_.weights[static_cast<std::size_t>(i)]);
    for (int c = 0; c < dc; ++c) {
      const double x = state.coords[static_cast<std::size_t>(c)];
      if (coords_exact) {
        if (std::abs(x - x1[static_cast<std::size_t>(c)]) > 1e-9) {
          lw = -std::numeric_limits<double>::infinity();
          break;
        }
      } else {
        const double r = (x - t * x1[static_cast<std::size_t>(c)]) / sigma;
        lw += -0.5 * r * r;  // shared normalizer cancels
      }
    }
    if (!std::isfinite(lw)) continue;
    for (int d = 0; d < da; ++d) {
      const Token a = state.tokens[static_cast<std::size_t>(d)];
      const double p = a == mask ? (1.0 - tt)
                                 : (a == a1[static_cast<std::size_t>(d)] ? tt : 0.0);
      if (p <= 0.0) {
        lw = -std::numeric_limits<double>::infinity();
        break;
      }
      lw += std::log(p);
    }
    logw[static_cast<std::size_t>(i)] = lw;
  }

  const double mx = *std::max_element(logw.begin(), logw.end());
  if (!std::isfinite(mx))
    fail(ErrorCode::UnreachableState, "joint state has zero mass under the flow");
  double z = 0.0;
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    w[static_cast<std::size_t>(i)] = std::exp(logw[static_cast<std::size_t>(i)] - mx);
    z += w[static_cast<std::size_t>(i)];
  }

  JointPrediction pred;
  pred.coords_hat.assign(static_cast<std::size_t>(dc), 0.0);
  pred.token_probs.probs.assign(static_cast<std::size_t>(da),
                                std::vector<double>(static_cast<std::size_t>(s), 0.0));
  for (int i = 0; i < n; ++i) {
    const double wi = w[static_cast<std::size_t>(i)] / z;
    if (wi == 0.0) continue;
    for (int c = 0; c < dc; ++c)
      pred.coords_hat[static_cast<std::size_t>(c)] +=
          wi * dataset_.coords[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    for (int d = 0; d < da; ++d)
      pred.token_probs
          .probs[static_cast<std::size_t>(d)]
                [static_cast<std::size_t>(
                    dataset_.tokens[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)])] += wi;
  }
  return pred;
}

JointMlpDenoiser::JointMlpDenoiser(const Alphabet& alphabet, int coord_dims,
                                   int token_dims, int hidden, std::uint64_t init_seed)
    : alphabet_(alphabet),
      coord_dims_(coord_dims),
      token_dims_(token_dims),
      hidden_(hidden) {
  if (!alphabet_.mask_enabled)
    fail(ErrorCode::InvalidAlphabet, "joint token alphabet needs a mask symbol");
  if (coord_dims < 1 || token_dims < 1 || hidden < 1)
    fail(ErrorCode::BadInput, "bad model shape");
  const std::size_t in = static_cast<std::size_t>(input_dim());
  const std::size_t h = static_cast<std::size_t>(hidden_);
  const std::size_t out_c = static_cast<std::size_t>(coord_dims_);
  const std::size_t out_t = static_cast<std::size_t>(token_dims_) * alphabet_.size_S;
  std::size_t cursor = 0;
  off_[0] = cursor; cursor += in * h;
  off_[1] = cursor; cursor += h;
  off_[2] = cursor; cursor += h * h;
  off_[3] = cursor; cursor += h;
  off_[4] = cursor; cursor += h * out_c;
  off_[5] = cursor; cursor += out_c;
  off_[6] = cursor; cursor += h * out_t;
  off_[7] = cursor; cursor += out_t;
  params_.assign(cursor, 0.0);

  Rng rng(init_seed);
  const auto init_block = [&](std::size_t off, std::size_t count, int fan_in) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) params_[off + i] = scale * rng.normal();
  };
  init_block(off_[0], in * h, static_cast<int>(in));
  init_block(off_[2], h * h, hidden_);
  init_block(off_[4], h * out_c, hidden_);
  init_block(off_[6], h * out_t, hidden_);
}

namespace {
void dense_forward(const double* w, const double* x, const double* b, int in, int out,
                   double* y) {
  std::memcpy(y, b, static_cast<std::size_t>(out) * sizeof(double));
  for (int i = 0; i < in; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* row = w + static_cast<std::ptrdiff_t>(i) * out;
    for (int o = 0; o < out; ++o) y[o] += xi * row[o];
  }
}
}  // namespace

JointPrediction JointMlpDenoiser::predict(const JointState& state) const {
  if (static_cast<int>(state.coords.size()) != coord_dims_ ||
      static_cast<int>(state.tokens.size()) != token_dims_)
    fail(ErrorCode::BadInput, "state has wrong shape");
  const int in = input_dim();
  const int h = hidden_;
  const int ns = alphabet_.num_states();
  const int s = alphabet_.size_S;

  std::vector<double> x(static_cast<std::size_t>(in), 0.0);
  for (int c = 0; c < coord_dims_; ++c) x[static_cast<std::size_t>(c)] = state.coords[static_cast<std::size_t>(c)];
  for (int d = 0; d < token_dims_; ++d)
    x[static_cast<std::size_t>(coord_dims_ + d * ns + state.tokens[static_cast<std::size_t>(d)])] = 1.0;
  joint_time_features(state.t, x.data() + coord_dims_ + token_dims_ * ns);
  joint_time_features(state.t_tilde, x.data() + coord_dims_ + token_dims_ * ns + kTimeFeatures);

  std::vector<double> h0(static_cast<std::size_t>(h)), h1(h0);
  dense_forward(params_.data() + off_[0], x.data(), params_.data() + off_[1], in, h, h0.data());
  for (double& v : h0) v = std::tanh(v);
  dense_forward(params_.data() + off_[2], h0.data(), params_.data() + off_[3], h, h, h1.data());
  for (double& v : h1) v = std::tanh(v);

  JointPrediction pred;
  pred.coords_hat.resize(static_cast<std::size_t>(coord_dims_));
  dense_forward(params_.data() + off_[4], h1.data(), params_.data() + off_[5], h,
                coord_dims_, pred.coords_hat.data());
  std::vector<double> logits(static_cast<std::size_t>(token_dims_) * s);
  dense_forward(params_.data() + off_[6], h1.data(), params_.data() + off_[7], h,
                token_dims_ * s, logits.data());
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(token_dims_));
  for (int d = 0; d < token_dims_; ++d)
    rows[static_cast<std::size_t>(d)].assign(
        logits.begin() + static_cast<std::ptrdiff_t>(d) * s,
        logits.begin() + static_cast<std::ptrdiff_t>(d + 1) * s);
  pred.token_probs.probs = apply_temperature(rows, 1.0);
  return pred;
}

double JointMlpDenoiser::loss_and_grad(const Batch& batch,
                                       std::vector<double>* grad) const {
  const std::size_t bsz = batch.states.size();
  if (bsz == 0 || batch.x1_coords.size() != bsz || batch.a1_tokens.size() != bsz)
    fail(ErrorCode::BadInput, "malformed batch");
  if (grad && grad->size() != params_.size()) grad->assign(params_.size(), 0.0);

  const int in = input_dim();
  const int h = hidden_;
  const int ns = alphabet_.num_states();
  const int s = alphabet_.size_S;
  const int out_c = coord_dims_;
  const int out_t = token_dims_ * s;
  const double inv_bc = 1.0 / (static_cast<double>(bsz) * coord_dims_);
  const double inv_bt = 1.0 / (static_cast<double>(bsz) * token_dims_);

  std::vector<double> x(static_cast<std::size_t>(in));
  std::vector<double> h0(static_cast<std::size_t>(h)), h1(h0);
  std::vector<double> chat(static_cast<std::size_t>(out_c));
  std::vector<double> logits(static_cast<std::size_t>(out_t));
  std::vector<double> dchat(static_cast<std::size_t>(out_c));
  std::vector<double> dlogits(static_cast<std::size_t>(out_t));
  std::vector<double> dh(static_cast<std::size_t>(h)), dz(static_cast<std::size_t>(h));

  double total = 0.0;
  for (std::size_t b = 0; b < bsz; ++b) {
    const JointState& state = batch.states[b];
    std::fill(x.begin(), x.end(), 0.0);
    for (int c = 0; c < coord_dims_; ++c) x[static_cast<std::size_t>(c)] = state.coords[static_cast<std::size_t>(c)];
    for (int d = 0; d < token_dims_; ++d)
      x[static_cast<std::size_t>(coord_dims_ + d * ns + state.tokens[static_cast<std::size_t>(d)])] = 1.0;
    joint_time_features(state.t, x.data() + coord_dims_ + token_dims_ * ns);
    joint_time_features(state.t_tilde,
                        x.data() + coord_dims_ + token_dims_ * ns + kTimeFeatures);

    dense_forward(params_.data() + off_[0], x.data(), params_.data() + off_[1], in, h, h0.data());
    for (double& v : h0) v = std::tanh(v);
    dense_forward(params_.data() + off_[2], h0.data(), params_.data() + off_[3], h, h, h1.data());
    for (double& v : h1) v = std::tanh(v);
    dense_forward(params_.data() + off_[4], h1.data(), params_.data() + off_[5], h, out_c, chat.data());
    dense_forward(params_.data() + off_[6], h1.data(), params_.data() + off_[7], h, out_t, logits.data());

    // Coordinate term, dropped when the coordinate clock is exactly 1.
    const double cw = state.t >= kClockOne ? 0.0 : 1.0 / (1.0 - state.t);
    for (int c = 0; c < out_c; ++c) {
      const double r = chat[static_cast<std::size_t>(c)] -
                       batch.x1_coords[b][static_cast<std::size_t>(c)];
      total += cw * r * r * inv_bc;
      dchat[static_cast<std::size_t>(c)] = 2.0 * cw * r * inv_bc;
    }
    // Token cross-entropy.
    for (int d = 0; d < token_dims_; ++d) {
      double* row = logits.data() + static_cast<std::ptrdiff_t>(d) * s;
      double mx = row[0];
      for (int k = 1; k < s; ++k) mx = std::max(mx, row[k]);
      double z = 0.0;
      for (int k = 0; k < s; ++k) z += std::exp(row[k] - mx);
      const Token target = batch.a1_tokens[b][static_cast<std::size_t>(d)];
      total += -(row[target] - mx - std::log(z)) * inv_bt;
      for (int k = 0; k < s; ++k) {
        const double p = std::exp(row[k] - mx) / z;
        dlogits[static_cast<std::size_t>(d * s + k)] =
            (p - (k == target ? 1.0 : 0.0)) * inv_bt;
      }
    }
    if (!grad) continue;

    double* g = grad->data();
    for (int i = 0; i < h; ++i) {
      const double hi = h1[static_cast<std::size_t>(i)];
      double* gc = g + off_[4] + static_cast<std::ptrdiff_t>(i) * out_c;
      for (int o = 0; o < out_c; ++o) gc[o] += hi * dchat[static_cast<std::size_t>(o)];
      double* gt = g + off_[6] + static_cast<std::ptrdiff_t>(i) * out_t;
      for (int o = 0; o < out_t; ++o) gt[o] += hi * dlogits[static_cast<std::size_t>(o)];
    }
    for (int o = 0; o < out_c; ++o) g[off_[5] + static_cast<std::size_t>(o)] += dchat[static_cast<std::size_t>(o)];
    for (int o = 0; o < out_t; ++o) g[off_[7] + static_cast<std::size_t>(o)] += dlogits[static_cast<std::size_t>(o)];

    for (int i = 0; i < h; ++i) {
      const double* rc = params_.data() + off_[4] + static_cast<std::ptrdiff_t>(i) * out_c;
      const double* rt = params_.data() + off_[6] + static_cast<std::ptrdiff_t>(i) * out_t;
      double acc = 0.0;
      for (int o = 0; o < out_c; ++o) acc += rc[o] * dchat[static_cast<std::size_t>(o)];
      for (int o = 0; o < out_t; ++o) acc += rt[o] * dlogits[static_cast<std::size_t>(o)];
      dz[static_cast<std::size_t>(i)] =
          acc * (1.0 - h1[static_cast<std::size_t>(i)] * h1[static_cast<std::size_t>(i)]);
    }
    for (int i = 0; i < h; ++i) {
      const double hi = h0[static_cast<std::size_t>(i)];
      double* grow = g + off_[2] + static_cast<std::ptrdiff_t>(i) * h;
      for (int o = 0; o < h; ++o) grow[o] += hi * dz[static_cast<std::size_t>(o)];
    }
    for (int o = 0; o < h; ++o) g[off_[3] + static_cast<std::size_t>(o)] += dz[static_cast<std::size_t>(o)];
    for (int i = 0; i < h; ++i) {
      const double* row = params_.data() + off_[2] + static_cast<std::ptrdiff_t>(i) * h;
      double acc = 0.0;
      for (int o = 0; o < h; ++o) acc += row[o] * dz[static_cast<std::size_t>(o)];
      dh[static_cast<std::size_t>(i)] =
          acc * (1.0 - h0[static_cast<std::size_t>(i)] * h0[static_cast<std::size_t>(i)]);
    }
    std::swap(dh, dz);
    for (int i = 0; i < in; ++i) {
      const double xi = x[static_cast<std::size_t>(i)];
      if (xi == 0.0) continue;
      double* grow = g + off_[0] + static_cast<std::ptrdiff_t>(i) * h;
      for (int o = 0; o < h; ++o) grow[o] += xi * dz[static_cast<std::size_t>(o)];
    }
    for (int o = 0; o < h; ++o) g[off_[1] + static_cast<std::size_t>(o)] += dz[static_cast<std::size_t>(o)];
  }
  return total;
}

nlohmann::json JointMlpDenoiser::to_json(const std::string& config_hash) const {
  nlohmann::json j;
  j["layout"] = {{"S", alphabet_.size_S},
                 {"coord_dims", coord_dims_},
                 {"token_dims", token_dims_},
                 {"hidden", hidden_}};
  j["params"] = params_;
  j["config_hash"] = config_hash;
  return j;
}

JointMlpDenoiser JointMlpDenoiser::from_json(const nlohmann::json& j) {
  const auto& layout = j.at("layout");
  JointMlpDenoiser model(Alphabet(layout.at("S").get<int>(), true),
                         layout.at("coord_dims").get<int>(),
                         layout.at("token_dims").get<int>(),
                         layout.at("hidden").get<int>(), 0);
  const std::vector<double> params = j.at("params").get<std::vector<double>>();
  if (params.size() != model.params_.size())
    fail(ErrorCode::BadInput, "checkpoint parameter count mismatch");
  model.params_ = params;
  return model;
}

double joint_train_step(JointMlpDenoiser& model, const JointDataset& dataset,
                        const JointTrainConfig& cfg, Rng& rng,
                        std::vector<double>& velocity) {
  JointMlpDenoiser::Batch batch;
  std::vector<double> dataset_weights = dataset.weights;
  if (dataset_weights.empty())
    dataset_weights.assign(static_cast<std::size_t>(dataset.size()),
                           1.0 / dataset.size());
  for (int b = 0; b < cfg.batch_size; ++b) {
    const int i = rng.categorical(dataset_weights);
    // Clock schedule: 10% structure clock clean, 10% token clock clean,
    // otherwise both uniform.
    const double branch = rng.uniform();
    double t, tt;
    if (branch < 0.1) {
      t = 1.0;
      tt = rng.uniform(cfg.time_eps, 1.0 - cfg.time_eps);
    } else if (branch < 0.2) {
      t = rng.uniform(cfg.time_eps, 1.0 - cfg.time_eps);
      tt = 1.0;
    } else {
      t = rng.uniform(cfg.time_eps, 1.0 - cfg.time_eps);
      tt = rng.uniform(cfg.time_eps, 1.0 - cfg.time_eps);
    }
    const auto& x1 = dataset.coords[static_cast<std::size_t>(i)];
    const auto& a1 = dataset.tokens[static_cast<std::size_t>(i)];
    batch.states.push_back(joint_corrupt(x1, a1, dataset.alphabet, t, tt, rng));
    batch.x1_coords.push_back(x1);
    batch.a1_tokens.push_back(a1);
  }

  std::vector<double> grad(model.params().size(), 0.0);
  const double loss = model.loss_and_grad(batch, &grad);
  if (!std::isfinite(loss)) fail(ErrorCode::TrainingDiverged, "non-finite joint loss");
  if (cfg.grad_clip > 0.0) {
    double norm_sq = 0.0;
    for (double g : grad) norm_sq += g * g;
    const double norm = std::sqrt(norm_sq);
    if (norm > cfg.grad_clip) {
      const double scale = cfg.grad_clip / norm;
      for (double& g : grad) g *= scale;
    }
  }
  auto& params = model.params();
  if (velocity.size() != params.size()) velocity.assign(params.size(), 0.0);
  if (cfg.optimizer == Optimizer::Momentum) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * grad[i];
      params[i] += velocity[i];
    }
  } else {
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i] -= cfg.learning_rate * grad[i];
  }
  return loss;
}

std::vector<double> joint_train(JointMlpDenoiser& model, const JointDataset& dataset,
                                const JointTrainConfig& cfg) {
  dataset.validate();
  Rng rng(cfg.seed);
  std::vector<double> velocity;
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(cfg.steps));
  for (long step = 0; step < cfg.steps; ++step)
    trace.push_back(joint_train_step(model, dataset, cfg, rng, velocity));
  return trace;
}

namespace {

DenoiserOutput temper_tokens(DenoiserOutput probs, double temperature) {
  if (temperature == 1.0) return probs;
  for (auto& row : probs.probs) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double& p : row) {
      p = p > 0.0 ? std::log(p) / temperature : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, p);
    }
    double z = 0.0;
    for (double& p : row) {
      p = std::isfinite(p) ? std::exp(p - mx) : 0.0;
      z += p;
    }
    for (double& p : row) p /= z;
  }
  return probs;
}

}  // namespace

JointSample joint_generate(const JointDenoiser& denoiser, GenerationMode mode,
                           const JointSamplerConfig& cfg,
                           const std::optional<JointSample>& conditioning, Rng& rng) {
  const bool move_coords = mode != GenerationMode::FixCoordsGenerateTokens;
  const bool move_tokens = mode != GenerationMode::FixTokensGenerateCoords;
  if (cfg.purity && !move_tokens)
    fail(ErrorCode::IncompatibleConfig, "purity needs a moving token modality");
  if (!move_coords || !move_tokens) {
    if (!conditioning)
      fail(ErrorCode::ModeError, "conditional mode without a conditioning value");
  }
  const Alphabet alphabet(denoiser.data_states(), /*mask=*/true);
  const Token mask = alphabet.mask_code();

  JointState state;
  if (move_coords) {
    state.coords.resize(static_cast<std::size_t>(denoiser.coord_dims()));
    for (double& v : state.coords) v = rng.normal();
  } else {
    state.coords = conditioning->coords;
  }
  if (move_tokens) {
    state.tokens.assign(static_cast<std::size_t>(denoiser.token_dims()), mask);
  } else {
    alphabet.check_sequence(conditioning->tokens, /*allow_mask=*/false);
    state.tokens = conditioning->tokens;
  }

  const long n_steps = std::max<long>(1, std::llround((cfg.t_end - cfg.t_start) / cfg.dt));
  const double dt = (cfg.t_end - cfg.t_start) / static_cast<double>(n_steps);

  for (long k = 0; k < n_steps; ++k) {
    const double u = cfg.t_start + dt * static_cast<double>(k);
    state.t = move_coords ? u : 1.0;
    state.t_tilde = move_tokens ? u : 1.0;
    const JointPrediction pred = denoiser.predict(state);
    const DenoiserOutput token_probs = temper_tokens(pred.token_probs, cfg.temperature);

    if (move_tokens) {
      const double p_unmask =
          std::min(dt * (1.0 + cfg.token_eta * u) / (1.0 - u), 1.0);
      const double p_remask = cfg.token_eta * dt;
      const bool final_step = u + dt >= 1.0 - 1e-12;
      const TokenSequence before = state.tokens;
      if (cfg.purity) {
        std::vector<std::size_t> masked;
        for (std::size_t d = 0; d < before.size(); ++d)
          if (before[d] == mask) masked.push_back(d);
        const long n_unmask = rng.binomial(static_cast<long>(masked.size()), p_unmask);
        if (n_unmask > 0) {
          std::stable_sort(masked.begin(), masked.end(),
                           [&](std::size_t a, std::size_t b) {
                             const double pa = *std::max_element(
                                 token_probs.probs[a].begin(), token_probs.probs[a].end());
                             const double pb = *std::max_element(
                                 token_probs.probs[b].begin(), token_probs.probs[b].end());
                             return pa > pb;
                           });
          for (long i = 0; i < n_unmask; ++i) {
            const std::size_t d = masked[static_cast<std::size_t>(i)];
            state.tokens[d] = rng.categorical(token_probs.probs[d]);
          }
        }
      } else {
        for (std::size_t d = 0; d < before.size(); ++d)
          if (before[d] == mask && rng.uniform() < p_unmask)
            state.tokens[d] = rng.categorical(token_probs.probs[d]);
      }
      if (p_remask > 0.0 && !final_step) {
        for (std::size_t d = 0; d < before.size(); ++d)
          if (before[d] != mask && rng.uniform() < p_remask) state.tokens[d] = mask;
      }
    }
    if (move_coords) {
      for (std::size_t c = 0; c < state.coords.size(); ++c)
        state.coords[c] +=
            dt * (pred.coords_hat[c] - state.coords[c]) / (1.0 - u);
    }
  }

  // Resolve residual masks at the end of the token clock.
  if (move_tokens) {
    std::vector<std::size_t> left;
    for (std::size_t d = 0; d < state.tokens.size(); ++d)
      if (state.tokens[d] == mask) left.push_back(d);
    if (!left.empty()) {
      if (cfg.final_fill == FinalFill::None)
        fail(ErrorCode::IncompleteSample, "mask tokens left and final fill disabled");
      state.t = move_coords ? cfg.t_end : 1.0;
      state.t_tilde = cfg.t_end;
      const JointPrediction pred = denoiser.predict(state);
      const DenoiserOutput token_probs = temper_tokens(pred.token_probs, cfg.temperature);
      for (std::size_t d : left) {
        state.tokens[d] =
            cfg.final_fill == FinalFill::Argmax
                ? static_cast<Token>(std::max_element(token_probs.probs[d].begin(),
                                                      token_probs.probs[d].end()) -
                                     token_probs.probs[d].begin())
                : rng.categorical(token_probs.probs[d]);
      }
    }
  }
  return {std::move(state.coords), std::move(state.tokens)};
}

std::vector<JointSample> joint_sample_batch(const JointDenoiser& denoiser,
                                            GenerationMode mode,
                                            const JointSamplerConfig& cfg,
                                            const std::optional<JointSample>& conditioning,
                                            long count, std::uint64_t seed, int threads) {
  std::vector<JointSample> out(static_cast<std::size_t>(count));
  if (count == 0) return out;
  int n_threads = threads > 0 ? threads
                              : static_cast<int>(std::thread::hardware_concurrency());
  n_threads = std::max(1, std::min<int>(n_threads, static_cast<int>(count)));

  std::exception_ptr first_error;
  std::mutex error_mutex;
  const auto worker = [&](int worker_id) {
    try {
      for (long i = worker_id; i < count; i += n_threads) {
        Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(i));
        out[static_cast<std::size_t>(i)] =
            joint_generate(denoiser, mode, cfg, conditioning, rng);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };
  if (n_threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_threads; ++w) pool.emplace_back(worker, w);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace dflow
