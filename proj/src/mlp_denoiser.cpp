#include "dflow/mlp_denoiser.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace dflow {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || batch_size <= 0 || steps < 0)
    fail(ErrorCode::BadInput, "bad training hyperparameters");
  if (!(time_eps > 0.0 && time_eps < 0.5))
    fail(ErrorCode::BadInput, "time_eps outside (0, 0.5)");
}

CorruptedBatch draw_corrupted_batch(const DataDistribution& dist,
                                    const ConditionalFlow& flow,
                                    const TrainConfig& cfg, int batch_size, Rng& rng) {
  CorruptedBatch batch;
  batch.x1.reserve(static_cast<std::size_t>(batch_size));
  batch.xt.reserve(static_cast<std::size_t>(batch_size));
  batch.t.reserve(static_cast<std::size_t>(batch_size));
  batch.weight.reserve(static_cast<std::size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    TokenSequence x1 = dist.sample(rng);
    const double t = rng.uniform(cfg.time_eps, 1.0 - cfg.time_eps);
    batch.xt.push_back(flow.sample_corrupted(t, x1, rng));
    batch.x1.push_back(std::move(x1));
    batch.t.push_back(t);
    batch.weight.push_back(cfg.weight_inv_one_minus_t ? 1.0 / (1.0 - t) : 1.0);
  }
  return batch;
}

namespace {

void time_features(double t, double* out) {
  for (int k = 0; k < 4; ++k) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(1 << k);
    out[2 * k] = std::sin(w * t);
    out[2 * k + 1] = std::cos(w * t);
  }
}

void matvec_t(const double* w, const double* x, const double* b, int in, int out,
              double* y) {
  // y = W^T x + b with W stored row-major [in][out].
  std::memcpy(y, b, static_cast<std::size_t>(out) * sizeof(double));
  for (int i = 0; i < in; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* row = w + static_cast<std::ptrdiff_t>(i) * out;
    for (int o = 0; o < out; ++o) y[o] += xi * row[o];
  }
}

}  // namespace

MlpDenoiser::MlpDenoiser(const Alphabet& alphabet, int dims, int hidden,
                         std::uint64_t init_seed)
    : alphabet_(alphabet), dims_(dims), hidden_(hidden) {
  if (dims < 1 || hidden < 1) fail(ErrorCode::BadInput, "bad model shape");
  const std::size_t in = static_cast<std::size_t>(input_dim());
  const std::size_t h = static_cast<std::size_t>(hidden_);
  const std::size_t out = static_cast<std::size_t>(dims_) * alphabet_.size_S;
  std::size_t cursor = 0;
  off_[0] = cursor; cursor += in * h;   // W0
  off_[1] = cursor; cursor += h;        // b0
  off_[2] = cursor; cursor += h * h;    // W1
  off_[3] = cursor; cursor += h;        // b1
  off_[4] = cursor; cursor += h * h;    // W2
  off_[5] = cursor; cursor += h;        // b2
  off_[6] = cursor; cursor += h * out;  // W3
  off_[7] = cursor; cursor += out;      // b3
  params_.assign(cursor, 0.0);

  Rng rng(init_seed);
  const auto init_block = [&](std::size_t off, std::size_t count, int fan_in) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) params_[off + i] = scale * rng.normal();
  };
  init_block(off_[0], in * h, static_cast<int>(in));
  init_block(off_[2], h * h, hidden_);
  init_block(off_[4], h * h, hidden_);
  init_block(off_[6], h * out, hidden_);
  // Biases start at zero.
}

void MlpDenoiser::set_temperature(double temperature) {
  if (!(temperature > 0.0)) fail(ErrorCode::BadInput, "temperature must be positive");
  temperature_ = temperature;
}

std::vector<std::vector<double>> MlpDenoiser::logits(const TokenSequence& xt,
                                                     double t) const {
  if (static_cast<int>(xt.size()) != dims_)
    fail(ErrorCode::BadInput, "state has wrong dimension");
  alphabet_.check_sequence(xt);
  const int ns = alphabet_.num_states();
  const int in = input_dim();
  const int h = hidden_;
  const int s = alphabet_.size_S;

  std::vector<double> x(static_cast<std::size_t>(in), 0.0);
  for (int d = 0; d < dims_; ++d)
    x[static_cast<std::size_t>(d * ns + xt[static_cast<std::size_t>(d)])] = 1.0;
  time_features(t, x.data() + dims_ * ns);

  std::vector<double> h0(static_cast<std::size_t>(h)), h1(h0), h2(h0);
  matvec_t(params_.data() + off_[0], x.data(), params_.data() + off_[1], in, h, h0.data());
  for (double& v : h0) v = std::tanh(v);
  matvec_t(params_.data() + off_[2], h0.data(), params_.data() + off_[3], h, h, h1.data());
  for (double& v : h1) v = std::tanh(v);
  matvec_t(params_.data() + off_[4], h1.data(), params_.data() + off_[5], h, h, h2.data());
  for (double& v : h2) v = std::tanh(v);

  std::vector<double> flat(static_cast<std::size_t>(dims_) * s);
  matvec_t(params_.data() + off_[6], h2.data(), params_.data() + off_[7], h,
           dims_ * s, flat.data());

  std::vector<std::vector<double>> out(static_cast<std::size_t>(dims_));
  for (int d = 0; d < dims_; ++d)
    out[static_cast<std::size_t>(d)].assign(flat.begin() + static_cast<std::ptrdiff_t>(d) * s,
                                            flat.begin() + static_cast<std::ptrdiff_t>(d + 1) * s);
  return out;
}

DenoiserOutput MlpDenoiser::predict(const TokenSequence& xt, double t) const {
  DenoiserOutput out;
  out.probs = apply_temperature(logits(xt, t), temperature_);
  return out;
}

double MlpDenoiser::loss_and_grad(const CorruptedBatch& batch,
                                  std::vector<double>* grad) const {
  const int ns = alphabet_.num_states();
  const int in = input_dim();
  const int h = hidden_;
  const int s = alphabet_.size_S;
  const int out = dims_ * s;
  const std::size_t batch_size = batch.xt.size();
  if (batch_size == 0 || batch.x1.size() != batch_size || batch.t.size() != batch_size)
    fail(ErrorCode::BadInput, "malformed batch");
  if (grad && grad->size() != params_.size()) grad->assign(params_.size(), 0.0);

  const double* W0 = params_.data() + off_[0];
  const double* W1 = params_.data() + off_[2];
  const double* W2 = params_.data() + off_[4];
  const double* W3 = params_.data() + off_[6];

  std::vector<double> x(static_cast<std::size_t>(in), 0.0);
  std::vector<double> h0(static_cast<std::size_t>(h)), h1(h0), h2(h0);
  std::vector<double> flat(static_cast<std::size_t>(out));
  std::vector<double> dlogits(static_cast<std::size_t>(out));
  std::vector<double> dh(static_cast<std::size_t>(h)), dz(static_cast<std::size_t>(h));

  const double inv_count = 1.0 / (static_cast<double>(batch_size) * dims_);
  double total = 0.0;

  for (std::size_t b = 0; b < batch_size; ++b) {
    const TokenSequence& xt = batch.xt[b];
    const TokenSequence& x1 = batch.x1[b];
    const double weight = batch.weight.empty() ? 1.0 : batch.weight[b];

    std::fill(x.begin(), x.end(), 0.0);
    for (int d = 0; d < dims_; ++d)
      x[static_cast<std::size_t>(d * ns + xt[static_cast<std::size_t>(d)])] = 1.0;
    time_features(batch.t[b], x.data() + dims_ * ns);

    matvec_t(W0, x.data(), params_.data() + off_[1], in, h, h0.data());
    for (double& v : h0) v = std::tanh(v);
    matvec_t(W1, h0.data(), params_.data() + off_[3], h, h, h1.data());
    for (double& v : h1) v = std::tanh(v);
    matvec_t(W2, h1.data(), params_.data() + off_[5], h, h, h2.data());
    for (double& v : h2) v = std::tanh(v);
    matvec_t(W3, h2.data(), params_.data() + off_[7], h, out, flat.data());

    // Per-dimension softmax cross-entropy on the logit head.
    for (int d = 0; d < dims_; ++d) {
      double* row = flat.data() + static_cast<std::ptrdiff_t>(d) * s;
      double mx = row[0];
      for (int k = 1; k < s; ++k) mx = std::max(mx, row[k]);
      double z = 0.0;
      for (int k = 0; k < s; ++k) z += std::exp(row[k] - mx);
      const Token target = x1[static_cast<std::size_t>(d)];
      const double logp = row[target] - mx - std::log(z);
      total += -weight * logp * inv_count;
      if (grad) {
        for (int k = 0; k < s; ++k) {
          const double p = std::exp(row[k] - mx) / z;
          dlogits[static_cast<std::size_t>(d * s + k)] =
              weight * (p - (k == target ? 1.0 : 0.0)) * inv_count;
        }
      }
    }
    if (!grad) continue;

    double* g = grad->data();
    // Head.
    for (int i = 0; i < h; ++i) {
      const double hi = h2[static_cast<std::size_t>(i)];
      double* grow = g + off_[6] + static_cast<std::ptrdiff_t>(i) * out;
      for (int o = 0; o < out; ++o) grow[o] += hi * dlogits[static_cast<std::size_t>(o)];
    }
    for (int o = 0; o < out; ++o) g[off_[7] + static_cast<std::size_t>(o)] += dlogits[static_cast<std::size_t>(o)];
    // dh2 = W3 dlogits; dz2 = dh2 * (1 - h2^2).
    for (int i = 0; i < h; ++i) {
      const double* row = W3 + static_cast<std::ptrdiff_t>(i) * out;
      double acc = 0.0;
      for (int o = 0; o < out; ++o) acc += row[o] * dlogits[static_cast<std::size_t>(o)];
      dz[static_cast<std::size_t>(i)] =
          acc * (1.0 - h2[static_cast<std::size_t>(i)] * h2[static_cast<std::size_t>(i)]);
    }
    // Layer 2.
    for (int i = 0; i < h; ++i) {
      const double hi = h1[static_cast<std::size_t>(i)];
      double* grow = g + off_[4] + static_cast<std::ptrdiff_t>(i) * h;
      for (int o = 0; o < h; ++o) grow[o] += hi * dz[static_cast<std::size_t>(o)];
    }
    for (int o = 0; o < h; ++o) g[off_[5] + static_cast<std::size_t>(o)] += dz[static_cast<std::size_t>(o)];
    for (int i = 0; i < h; ++i) {
      const double* row = W2 + static_cast<std::ptrdiff_t>(i) * h;
      double acc = 0.0;
      for (int o = 0; o < h; ++o) acc += row[o] * dz[static_cast<std::size_t>(o)];
      dh[static_cast<std::size_t>(i)] =
          acc * (1.0 - h1[static_cast<std::size_t>(i)] * h1[static_cast<std::size_t>(i)]);
    }
    std::swap(dh, dz);
    // Layer 1.
    for (int i = 0; i < h; ++i) {
      const double hi = h0[static_cast<std::size_t>(i)];
      double* grow = g + off_[2] + static_cast<std::ptrdiff_t>(i) * h;
      for (int o = 0; o < h; ++o) grow[o] += hi * dz[static_cast<std::size_t>(o)];
    }
    for (int o = 0; o < h; ++o) g[off_[3] + static_cast<std::size_t>(o)] += dz[static_cast<std::size_t>(o)];
    for (int i = 0; i < h; ++i) {
      const double* row = W1 + static_cast<std::ptrdiff_t>(i) * h;
      double acc = 0.0;
      for (int o = 0; o < h; ++o) acc += row[o] * dz[static_cast<std::size_t>(o)];
      dh[static_cast<std::size_t>(i)] =
          acc * (1.0 - h0[static_cast<std::size_t>(i)] * h0[static_cast<std::size_t>(i)]);
    }
    std::swap(dh, dz);
    // Embedding layer; input is sparse apart from the time features.
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

std::vector<double> train(MlpDenoiser& mlp, const DataDistribution& dist,
                          const ConditionalFlow& flow, const TrainConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(cfg.steps));
  std::vector<double> grad(mlp.param_count(), 0.0);
  std::vector<double> velocity;
  if (cfg.optimizer == Optimizer::Momentum) velocity.assign(mlp.param_count(), 0.0);

  for (long step = 0; step < cfg.steps; ++step) {
    const CorruptedBatch batch =
        draw_corrupted_batch(dist, flow, cfg, cfg.batch_size, rng);
    std::fill(grad.begin(), grad.end(), 0.0);
    const double loss = mlp.loss_and_grad(batch, &grad);
    if (!std::isfinite(loss))
      fail(ErrorCode::TrainingDiverged, "non-finite loss at step " + std::to_string(step));
    const double frac = cfg.steps > 1
                            ? static_cast<double>(step) / static_cast<double>(cfg.steps - 1)
                            : 0.0;
    const double lr =
        cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
    auto& params = mlp.params();
    if (cfg.optimizer == Optimizer::Momentum) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] - lr * grad[i];
        params[i] += velocity[i];
      }
    } else {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
    }
    trace.push_back(loss);
  }
  return trace;
}

double ce_loss(const Denoiser& denoiser, const ConditionalFlow& flow,
               std::span<const TokenSequence> x1_batch, Rng& rng, double time_eps) {
  if (x1_batch.empty()) fail(ErrorCode::BadInput, "empty batch");
  double total = 0.0;
  long count = 0;
  for (const TokenSequence& x1 : x1_batch) {
    const double t = rng.uniform(time_eps, 1.0 - time_eps);
    const TokenSequence xt = flow.sample_corrupted(t, x1, rng);
    const DenoiserOutput out = denoiser.predict(xt, t);
    for (std::size_t d = 0; d < x1.size(); ++d) {
      const double p = out.probs[d][static_cast<std::size_t>(x1[d])];
      total += -std::log(std::max(p, 1e-300));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

nlohmann::json MlpDenoiser::to_json(const std::string& config_hash) const {
  nlohmann::json j;
  j["layout"] = {{"S", alphabet_.size_S},
                 {"mask_enabled", alphabet_.mask_enabled},
                 {"D", dims_},
                 {"hidden", hidden_},
                 {"input_dim", input_dim()},
                 {"time_features", kTimeFeatures}};
  j["temperature"] = temperature_;
  j["params"] = params_;
  j["config_hash"] = config_hash;
  return j;
}

MlpDenoiser MlpDenoiser::from_json(const nlohmann::json& j) {
  const auto& layout = j.at("layout");
  Alphabet alphabet(layout.at("S").get<int>(), layout.at("mask_enabled").get<bool>());
  MlpDenoiser mlp(alphabet, layout.at("D").get<int>(), layout.at("hidden").get<int>(),
                  /*init_seed=*/0);
  const std::vector<double> params = j.at("params").get<std::vector<double>>();
  if (params.size() != mlp.params_.size())
    fail(ErrorCode::BadInput, "checkpoint parameter count mismatch");
  mlp.params_ = params;
  mlp.set_temperature(j.value("temperature", 1.0));
  return mlp;
}

void MlpDenoiser::save_file(const std::string& path, const std::string& config_hash) const {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::BadInput, "cannot write " + path);
  out << to_json(config_hash).dump() << "\n";
}

MlpDenoiser MlpDenoiser::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::BadInput, "cannot open " + path);
  nlohmann::json j;
  in >> j;
  return from_json(j);
}

}  // namespace dflow
