#include "dflow/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dflow {

void EvalReport::set(const std::string& name, double value, double stderr_, long n) {
  if (!std::isfinite(value))
    fail(ErrorCode::BadInput, "non-finite metric value for " + name);
  metrics[name] = MetricValue{value, stderr_, n};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["sample_count"] = sample_count;
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [name, metric] : metrics) {
    nlohmann::json entry = {{"value", metric.value}, {"n", metric.n}};
    if (std::isfinite(metric.stderr_)) entry["stderr"] = metric.stderr_;
    m[name] = std::move(entry);
  }
  j["metrics"] = std::move(m);
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "name,value,stderr,n\n";
  for (const auto& [name, metric] : metrics) {
    out << name << "," << metric.value << ",";
    if (std::isfinite(metric.stderr_)) out << metric.stderr_;
    out << "," << metric.n << "\n";
  }
  return out.str();
}

void EvalReport::save(const std::string& json_path, const std::string& csv_path) const {
  std::ofstream j(json_path);
  if (!j) fail(ErrorCode::BadInput, "cannot write " + json_path);
  j << to_json().dump(2) << "\n";
  std::ofstream c(csv_path);
  if (!c) fail(ErrorCode::BadInput, "cannot write " + csv_path);
  c << to_csv();
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size())
    fail(ErrorCode::BadInput, "tv_distance over mismatched spaces");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

std::vector<double> state_histogram(std::span<const TokenSequence> samples,
                                    int dims, int num_states) {
  const std::size_t total = state_space_size(dims, num_states);
  std::vector<double> hist(total, 0.0);
  if (samples.empty()) return hist;
  const double w = 1.0 / static_cast<double>(samples.size());
  for (const TokenSequence& s : samples) {
    if (static_cast<int>(s.size()) != dims)
      fail(ErrorCode::BadInput, "sample with wrong dimension");
    hist[encode_state(s, num_states)] += w;
  }
  return hist;
}

double sample_entropy(std::span<const TokenSequence> samples) {
  if (samples.empty()) fail(ErrorCode::BadInput, "no samples");
  std::map<Token, long> counts;
  long total = 0;
  for (const TokenSequence& s : samples) {
    for (Token tok : s) {
      counts[tok]++;
      ++total;
    }
  }
  double entropy = 0.0;
  for (const auto& [tok, count] : counts) {
    const double p = static_cast<double>(count) / static_cast<double>(total);
    entropy -= p * std::log2(p);
  }
  return entropy;
}

ElboEstimate masking_elbo(const Denoiser& denoiser, const DataDistribution& dist,
                          const ConditionalFlow& flow, long mc_samples, Rng& rng,
                          double time_eps) {
  if (flow.kind() != FlowKind::Masking)
    fail(ErrorCode::IncompatibleConfig, "likelihood bound needs a masking flow");
  if (mc_samples <= 1) fail(ErrorCode::BadInput, "need at least 2 samples");
  const Token mask = flow.alphabet().mask_code();
  const double ln2 = std::log(2.0);

  double sum = 0.0;
  double sum_sq = 0.0;
  for (long i = 0; i < mc_samples; ++i) {
    const TokenSequence x1 = dist.sample(rng);
    const double t = rng.uniform(time_eps, 1.0 - time_eps);
    const TokenSequence xt = flow.sample_corrupted(t, x1, rng);
    const DenoiserOutput pred = denoiser.predict(xt, t);
    double value = 0.0;
    for (std::size_t d = 0; d < x1.size(); ++d) {
      if (xt[d] != mask) continue;
      const double p = pred.probs[d][static_cast<std::size_t>(x1[d])];
      value += -std::log(std::max(p, 1e-300)) / (1.0 - t);
    }
    value /= static_cast<double>(x1.size()) * ln2;  // bits per token
    sum += value;
    sum_sq += value * value;
  }
  const double n = static_cast<double>(mc_samples);
  const double mean = sum / n;
  const double var = std::max(sum_sq / n - mean * mean, 0.0);
  return {mean, std::sqrt(var / n), mc_samples};
}

namespace {
JumpStats stats_from(std::vector<long> totals, std::vector<double> per_dim_mean) {
  JumpStats stats;
  stats.per_dim_mean = std::move(per_dim_mean);
  if (totals.empty()) return stats;
  const double n = static_cast<double>(totals.size());
  for (long j : totals) {
    stats.mean += static_cast<double>(j) / n;
    stats.count_histogram[j]++;
  }
  for (long j : totals) {
    const double d = static_cast<double>(j) - stats.mean;
    stats.variance += d * d / n;
  }
  return stats;
}
}  // namespace

JumpStats jump_stats(std::span<const Trajectory> trajectories) {
  std::vector<long> totals;
  std::vector<double> per_dim;
  totals.reserve(trajectories.size());
  for (const Trajectory& traj : trajectories) {
    totals.push_back(traj.total_jumps());
    if (per_dim.empty()) per_dim.assign(traj.jump_count_per_dim.size(), 0.0);
    for (std::size_t d = 0; d < traj.jump_count_per_dim.size(); ++d)
      per_dim[d] += static_cast<double>(traj.jump_count_per_dim[d]) /
                    static_cast<double>(trajectories.size());
  }
  return stats_from(std::move(totals), std::move(per_dim));
}

JumpStats jump_stats(std::span<const long> total_jumps) {
  return stats_from(std::vector<long>(total_jumps.begin(), total_jumps.end()), {});
}

double d3pm_equivalence_check(int T, int t_index,
                              std::span<const double> denoiser_row) {
  if (t_index < 1 || t_index > T) fail(ErrorCode::BadInput, "t_index outside 1..T");
  const int s = static_cast<int>(denoiser_row.size());
  const int n = s + 1;  // data tokens plus the absorbing state
  const int absorbing = s;

  // Discrete-time route: noise survival products under beta_k = 1/(T - k + 1),
  // reverse kernel assembled from the posterior of the absorbing process.
  double keep_t = 1.0;      // prod_{k<=t} (1 - beta_k)
  double keep_prev = 1.0;   // prod_{k<=t-1} (1 - beta_k)
  for (int k = 1; k <= t_index; ++k) {
    const double beta = 1.0 / static_cast<double>(T - k + 1);
    if (k <= t_index - 1) keep_prev *= 1.0 - beta;
    keep_t *= 1.0 - beta;
  }
  const double beta_t = 1.0 / static_cast<double>(T - t_index + 1);
  std::vector<std::vector<double>> discrete(
      static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < n; ++i) {
    if (i != absorbing) {
      discrete[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
      continue;
    }
    discrete[static_cast<std::size_t>(i)][static_cast<std::size_t>(absorbing)] =
        (1.0 - keep_prev) / (1.0 - keep_t);
    const double unmask = beta_t * keep_prev / (1.0 - keep_t);
    for (int j = 0; j < s; ++j)
      discrete[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          unmask * denoiser_row[static_cast<std::size_t>(j)];
  }

  // Continuous-time route through the library rate machinery at the matching
  // clock position.
  const double xi = static_cast<double>(t_index) / static_cast<double>(T);
  const double t = 1.0 - xi;
  const double dt = 1.0 / static_cast<double>(T);
  const Alphabet alphabet(s, /*mask=*/true);
  const ConditionalFlow flow = ConditionalFlow::masking(alphabet);
  const RatePlan plan(flow, 0.0, DbKind::None);
  DenoiserOutput pred;
  pred.probs = {std::vector<double>(denoiser_row.begin(), denoiser_row.end())};

  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    TokenSequence xt = {static_cast<Token>(i)};
    const RateRow row = unconditional_rate_row(plan, pred, t, xt, 0);
    const std::vector<double> kernel = euler_step_probs(row, dt);
    for (int j = 0; j < n; ++j)
      worst = std::max(worst,
                       std::abs(kernel[static_cast<std::size_t>(j)] -
                                discrete[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
  }
  return worst;
}

double kolmogorov_residual(const RatePlan& plan, Token x1_tok,
                           std::span<const double> t_grid) {
  const ConditionalFlow& flow = *plan.flow;
  const int n = flow.alphabet().num_states();
  double worst = 0.0;
  for (double t : t_grid) {
    const std::vector<double> p = flow.prob_row(t, x1_tok);
    const std::vector<double> dp = flow.prob_dt_row(t, x1_tok);
    std::vector<double> balance(static_cast<std::size_t>(n), 0.0);
    for (Token i = 0; i < n; ++i) {
      const RateRow row = conditional_rate_row(plan, t, i, x1_tok);
      for (int j = 0; j < n; ++j)
        balance[static_cast<std::size_t>(j)] +=
            row.rates[static_cast<std::size_t>(j)] * p[static_cast<std::size_t>(i)];
    }
    for (int j = 0; j < n; ++j)
      worst = std::max(worst, std::abs(dp[static_cast<std::size_t>(j)] -
                                       balance[static_cast<std::size_t>(j)]));
  }
  return worst;
}

double diffusion_reverse_rate_discrepancy(std::span<const double> t_grid) {
  constexpr int s = 3;
  const Alphabet alphabet(s, /*mask=*/false);
  const ConditionalFlow flow = ConditionalFlow::uniform(alphabet);

  double worst = 0.0;
  for (double t : t_grid) {
    if (!(t > 0.0 && t < 1.0)) fail(ErrorCode::BadInput, "grid time outside (0, 1)");
    const double beta = 1.0 / (3.0 * t);
    const double b_t = beta;
    const double c_t = beta;
    const double a_t = b_t * (1.0 - t) / (1.0 + 2.0 * t);
    for (Token x1 = 0; x1 < s; ++x1) {
      const std::vector<double> p = flow.prob_row(t, x1);
      for (Token i = 0; i < s; ++i) {
        const RateRow star = r_star_row(flow, t, i, x1);
        for (Token j = 0; j < s; ++j) {
          if (i == j) continue;
          // Reverse rate of the corruption process R = beta (11^T - 3 I).
          const double reverse = beta * p[static_cast<std::size_t>(j)] /
                                 p[static_cast<std::size_t>(i)];
          // Detailed-balance family a dK{i,x1} + b dK{j,x1} + c (off both).
          double db = 0.0;
          if (i == x1) db += a_t;
          if (j == x1) db += b_t;
          if (i != x1 && j != x1) db += c_t;
          const double combined = star.rates[static_cast<std::size_t>(j)] + db;
          worst = std::max(worst, std::abs(reverse - combined));
        }
      }
    }
  }
  return worst;
}

}  // namespace dflow
