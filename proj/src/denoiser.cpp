#include "dflow/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dflow {

void DenoiserOutput::check_normalized(double tol) const {
  for (const auto& row : probs) {
    double sum = 0.0;
    for (double p : row) {
      if (p < -tol || !std::isfinite(p))
        fail(ErrorCode::InvalidDenoiser, "denoiser row with bad probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > tol)
      fail(ErrorCode::InvalidDenoiser, "denoiser row does not sum to 1");
  }
}

std::vector<std::vector<double>> apply_temperature(
    const std::vector<std::vector<double>>& logits, double temperature) {
  if (!(temperature > 0.0)) fail(ErrorCode::BadInput, "temperature must be positive");
  std::vector<std::vector<double>> out(logits.size());
  for (std::size_t d = 0; d < logits.size(); ++d) {
    const auto& row = logits[d];
    std::vector<double> scaled(row.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < row.size(); ++k) {
      scaled[k] = row[k] / temperature;
      mx = std::max(mx, scaled[k]);
    }
    double z = 0.0;
    for (double& v : scaled) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : scaled) v /= z;
    out[d] = std::move(scaled);
  }
  return out;
}

ExactPosteriorDenoiser::ExactPosteriorDenoiser(DataDistribution dist,
                                               ConditionalFlow flow)
    : dist_(std::move(dist)), flow_(std::move(flow)) {
  if (!dist_.is_tabular())
    fail(ErrorCode::NotAvailable, "exact posterior needs a tabular distribution");
}

DenoiserOutput ExactPosteriorDenoiser::predict(const TokenSequence& xt,
                                               double t) const {
  const auto& entries = dist_.support();
  const int dims = dist_.dims();
  const int s = dist_.alphabet().size_S;
  if (static_cast<int>(xt.size()) != dims)
    fail(ErrorCode::BadInput, "state has wrong dimension");
  // The posterior itself has no endpoint singularity; the state is either
  // reachable (Z > 0) or rejected below. No time clamp here.
  if (!(t >= 0.0 && t <= 1.0)) fail(ErrorCode::TimeDomain, "time outside [0, 1]");

  std::vector<double> weights(entries.size());
  double z = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    double w = entries[i].p;
    for (int d = 0; d < dims && w > 0.0; ++d)
      w *= flow_.prob(t, entries[i].tokens[static_cast<std::size_t>(d)],
                      xt[static_cast<std::size_t>(d)]);
    weights[i] = w;
    z += w;
  }
  if (!(z > 0.0))
    fail(ErrorCode::UnreachableState, "state has zero mass under the flow");

  DenoiserOutput out;
  out.probs.assign(static_cast<std::size_t>(dims),
                   std::vector<double>(static_cast<std::size_t>(s), 0.0));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const double w = weights[i] / z;
    for (int d = 0; d < dims; ++d)
      out.probs[static_cast<std::size_t>(d)]
               [static_cast<std::size_t>(entries[i].tokens[static_cast<std::size_t>(d)])] += w;
  }
  return out;
}

TemperatureDenoiser::TemperatureDenoiser(std::shared_ptr<const Denoiser> base,
                                         double temperature)
    : base_(std::move(base)), temperature_(temperature) {
  if (!(temperature_ > 0.0)) fail(ErrorCode::BadInput, "temperature must be positive");
}

DenoiserOutput TemperatureDenoiser::predict(const TokenSequence& xt, double t) const {
  DenoiserOutput out = base_->predict(xt, t);
  if (temperature_ == 1.0) return out;
  for (auto& row : out.probs) {
    // log p / T with -inf preserved for zero-mass tokens.
    double mx = -std::numeric_limits<double>::infinity();
    for (double& p : row) {
      p = p > 0.0 ? std::log(p) / temperature_
                  : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, p);
    }
    double z = 0.0;
    for (double& p : row) {
      p = std::isfinite(p) ? std::exp(p - mx) : 0.0;
      z += p;
    }
    for (double& p : row) p /= z;
  }
  return out;
}

TabulatedDenoiser::TabulatedDenoiser(const Denoiser& base, const Alphabet& alphabet,
                                     int dims, std::vector<double> time_grid)
    : alphabet_(alphabet),
      dims_(dims),
      s_(base.data_states()),
      time_grid_(std::move(time_grid)) {
  if (time_grid_.empty()) fail(ErrorCode::BadInput, "empty time grid");
  const std::size_t total = state_space_size(dims_, alphabet_.num_states());
  if (total > 2'000'000) fail(ErrorCode::Capacity, "state space too large to tabulate");
  table_.resize(time_grid_.size());
  for (std::size_t ti = 0; ti < time_grid_.size(); ++ti) {
    table_[ti].resize(total);
    for (std::size_t idx = 0; idx < total; ++idx) {
      const TokenSequence state = decode_state(idx, dims_, alphabet_.num_states());
      try {
        const DenoiserOutput out = base.predict(state, time_grid_[ti]);
        std::vector<double> flat(static_cast<std::size_t>(dims_ * s_));
        for (int d = 0; d < dims_; ++d)
          for (int k = 0; k < s_; ++k)
            flat[static_cast<std::size_t>(d * s_ + k)] =
                out.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)];
        table_[ti][idx] = std::move(flat);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::UnreachableState) throw;
        // Left empty; rejected if ever requested.
      }
    }
  }
}

DenoiserOutput TabulatedDenoiser::predict(const TokenSequence& xt, double t) const {
  const auto it = std::lower_bound(time_grid_.begin(), time_grid_.end(), t - 1e-12);
  if (it == time_grid_.end() || std::abs(*it - t) > 1e-9)
    fail(ErrorCode::BadInput, "time not on the tabulated grid");
  const std::size_t ti = static_cast<std::size_t>(it - time_grid_.begin());
  const std::size_t idx = encode_state(xt, alphabet_.num_states());
  const std::vector<double>& flat = table_[ti][idx];
  if (flat.empty())
    fail(ErrorCode::UnreachableState, "state has zero mass under the flow");
  DenoiserOutput out;
  out.probs.assign(static_cast<std::size_t>(dims_),
                   std::vector<double>(static_cast<std::size_t>(s_)));
  for (int d = 0; d < dims_; ++d)
    for (int k = 0; k < s_; ++k)
      out.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)] =
          flat[static_cast<std::size_t>(d * s_ + k)];
  return out;
}

}  // namespace dflow
