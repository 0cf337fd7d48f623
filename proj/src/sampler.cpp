#include "dflow/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <thread>

namespace dflow {

const char* to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::FactorizedEuler: return "factorized_euler";
    case Scheme::SampleThenPlug: return "sample_then_plug";
    case Scheme::MaskingFast: return "masking_fast";
    case Scheme::MaskingPurity: return "masking_purity";
  }
  return "?";
}

void SamplerConfig::validate() const {
  if (!(dt > 0.0 && dt < 1.0)) fail(ErrorCode::BadInput, "dt outside (0, 1)");
  if (eta < 0.0) fail(ErrorCode::BadInput, "eta must be non-negative");
  if (!(temperature > 0.0)) fail(ErrorCode::BadInput, "temperature must be positive");
  if (!(t_start >= 0.0 && t_start < t_end && t_end <= 1.0))
    fail(ErrorCode::BadInput, "bad time window");
}

std::vector<double> euler_step_probs(const RateRow& row, double dt) {
  std::vector<double> probs(row.rates.size(), 0.0);
  double off = 0.0;
  for (std::size_t j = 0; j < row.rates.size(); ++j) {
    if (static_cast<Token>(j) == row.from_tok) continue;
    probs[j] = std::min(row.rates[j] * dt, 1.0);
    off += probs[j];
  }
  probs[static_cast<std::size_t>(row.from_tok)] = std::max(1.0 - off, 0.0);
  return probs;
}

namespace {

Token draw_step(const RateRow& row, double dt, Rng& rng) {
  if (row.off_diagonal_sum() == 0.0) return row.from_tok;
  const std::vector<double> probs = euler_step_probs(row, dt);
  return rng.categorical(probs);
}

Token draw_data_token(const std::vector<double>& probs, Rng& rng) {
  return rng.categorical(probs);
}

Token argmax_token(const std::vector<double>& probs) {
  return static_cast<Token>(std::max_element(probs.begin(), probs.end()) -
                            probs.begin());
}

double unmask_probability(double t, double dt, double eta) {
  return std::min(dt * (1.0 + eta * t) / (1.0 - t), 1.0);
}

void require_masking(const RatePlan& plan, const char* what) {
  if (plan.flow->kind() != FlowKind::Masking)
    fail(ErrorCode::IncompatibleConfig, std::string(what) + " requires a masking flow");
}

}  // namespace

TokenSequence euler_step(const RatePlan& plan, const Denoiser& denoiser, double t,
                         const TokenSequence& xt, double dt, Rng& rng) {
  const DenoiserOutput pred = denoiser.predict(xt, t);
  TokenSequence next = xt;
  for (int d = 0; d < static_cast<int>(xt.size()); ++d) {
    const RateRow row = unconditional_rate_row(plan, pred, t, xt, d);
    next[static_cast<std::size_t>(d)] = draw_step(row, dt, rng);
  }
  return next;
}

TokenSequence sample_then_plug_step(const RatePlan& plan, const Denoiser& denoiser,
                                    double t, const TokenSequence& xt, double dt,
                                    Rng& rng) {
  const DenoiserOutput pred = denoiser.predict(xt, t);
  TokenSequence next = xt;
  for (int d = 0; d < static_cast<int>(xt.size()); ++d) {
    const Token x1 = draw_data_token(pred.probs[static_cast<std::size_t>(d)], rng);
    const RateRow row =
        conditional_rate_row(plan, t, xt[static_cast<std::size_t>(d)], x1);
    next[static_cast<std::size_t>(d)] = draw_step(row, dt, rng);
  }
  return next;
}

TokenSequence masking_fast_step(const RatePlan& plan, const Denoiser& denoiser,
                                double t, const TokenSequence& xt, double dt,
                                Rng& rng) {
  require_masking(plan, "masking_fast_step");
  const Alphabet& alphabet = plan.flow->alphabet();
  const Token mask = alphabet.mask_code();
  const double p_unmask = unmask_probability(t, dt, plan.eta);
  const double p_remask = plan.eta * dt;
  const bool final_step = t + dt >= 1.0 - 1e-12;

  const DenoiserOutput pred = denoiser.predict(xt, t);
  TokenSequence next = xt;
  for (std::size_t d = 0; d < xt.size(); ++d) {
    if (xt[d] == mask && rng.uniform() < p_unmask)
      next[d] = draw_data_token(pred.probs[d], rng);
  }
  if (p_remask > 0.0 && !final_step) {
    for (std::size_t d = 0; d < xt.size(); ++d) {
      if (xt[d] != mask && rng.uniform() < p_remask) next[d] = mask;
    }
  }
  return next;
}

TokenSequence purity_step(const RatePlan& plan, const Denoiser& denoiser, double t,
                          const TokenSequence& xt, double dt, Rng& rng) {
  require_masking(plan, "purity_step");
  const Alphabet& alphabet = plan.flow->alphabet();
  const Token mask = alphabet.mask_code();
  const DenoiserOutput pred = denoiser.predict(xt, t);

  std::vector<std::size_t> masked;
  for (std::size_t d = 0; d < xt.size(); ++d)
    if (xt[d] == mask) masked.push_back(d);

  TokenSequence next = xt;
  if (!masked.empty()) {
    const double p_unmask = unmask_probability(t, dt, plan.eta);
    const long n_unmask = rng.binomial(static_cast<long>(masked.size()), p_unmask);
    if (n_unmask > 0) {
      // Highest purity first; ties resolved by ascending dimension.
      std::stable_sort(masked.begin(), masked.end(),
                       [&](std::size_t a, std::size_t b) {
                         const double pa = *std::max_element(pred.probs[a].begin(),
                                                             pred.probs[a].end());
                         const double pb = *std::max_element(pred.probs[b].begin(),
                                                             pred.probs[b].end());
                         return pa > pb;
                       });
      for (long i = 0; i < n_unmask; ++i) {
        const std::size_t d = masked[static_cast<std::size_t>(i)];
        next[d] = draw_data_token(pred.probs[d], rng);
      }
    }
  }
  const double p_remask = plan.eta * dt;
  if (p_remask > 0.0 && t + dt < 1.0 - 1e-12) {
    // Dimensions unmasked this very step stay put.
    for (std::size_t d = 0; d < xt.size(); ++d)
      if (xt[d] != mask && rng.uniform() < p_remask) next[d] = mask;
  }
  return next;
}

namespace {

struct StepRunner {
  const RatePlan& plan;
  const Denoiser& denoiser;
  const SamplerConfig& cfg;

  TokenSequence operator()(double t, const TokenSequence& xt, double dt, Rng& rng) const {
    switch (cfg.scheme) {
      case Scheme::FactorizedEuler: return euler_step(plan, denoiser, t, xt, dt, rng);
      case Scheme::SampleThenPlug:
        return sample_then_plug_step(plan, denoiser, t, xt, dt, rng);
      case Scheme::MaskingFast: return masking_fast_step(plan, denoiser, t, xt, dt, rng);
      case Scheme::MaskingPurity: return purity_step(plan, denoiser, t, xt, dt, rng);
    }
    return xt;
  }
};

void record_changes(Trajectory* trajectory, std::vector<int>* per_dim,
                    const TokenSequence& before, const TokenSequence& after,
                    double t, double dt) {
  std::vector<int> changed;
  for (int d = 0; d < static_cast<int>(before.size()); ++d)
    if (before[static_cast<std::size_t>(d)] != after[static_cast<std::size_t>(d)])
      changed.push_back(d);
  if (changed.empty()) return;
  TokenSequence state = before;
  for (std::size_t i = 0; i < changed.size(); ++i) {
    const int d = changed[i];
    const double tj = t + dt * static_cast<double>(i + 1) /
                              static_cast<double>(changed.size() + 1);
    (*per_dim)[static_cast<std::size_t>(d)]++;
    if (trajectory) {
      state[static_cast<std::size_t>(d)] = after[static_cast<std::size_t>(d)];
      trajectory->jumps.push_back({tj, d, before[static_cast<std::size_t>(d)],
                                   after[static_cast<std::size_t>(d)]});
      trajectory->times.push_back(tj);
      trajectory->states.push_back(state);
    }
  }
}

struct RunOutput {
  TokenSequence sample;
  long jumps = 0;
  TokenSequence snapshot;
};

RunOutput run_trajectory(const RatePlan& plan, const Denoiser& denoiser, int dims,
                         const SamplerConfig& cfg, Rng& rng, Trajectory* trajectory,
                         double snapshot_time) {
  const ConditionalFlow& flow = *plan.flow;
  if ((cfg.scheme == Scheme::MaskingFast || cfg.scheme == Scheme::MaskingPurity) &&
      flow.kind() != FlowKind::Masking)
    fail(ErrorCode::IncompatibleConfig, "scheme requires a masking flow");

  const long n_steps = std::max<long>(1, std::llround((cfg.t_end - cfg.t_start) / cfg.dt));
  const double dt = (cfg.t_end - cfg.t_start) / static_cast<double>(n_steps);

  TokenSequence xt = flow.sample_prior(dims, rng);
  std::vector<int> per_dim(static_cast<std::size_t>(dims), 0);
  if (trajectory) trajectory->initial_state = xt;

  RunOutput out;
  StepRunner step{plan, denoiser, cfg};
  bool snapped = snapshot_time < 0.0;
  for (long k = 0; k < n_steps; ++k) {
    const double t = cfg.t_start + dt * static_cast<double>(k);
    if (!snapped && t >= snapshot_time - 1e-12) {
      out.snapshot = xt;
      snapped = true;
    }
    TokenSequence next = step(t, xt, dt, rng);
    record_changes(trajectory, &per_dim, xt, next, t, dt);
    xt = std::move(next);
  }
  if (!snapped) out.snapshot = xt;

  // Resolve residual masks. The fill is the last transition of each affected
  // dimension and counts as its final jump; fills are stamped in (t_end, 1).
  if (flow.alphabet().mask_enabled) {
    const Token mask = flow.alphabet().mask_code();
    std::vector<std::size_t> left;
    for (std::size_t d = 0; d < xt.size(); ++d)
      if (xt[d] == mask) left.push_back(d);
    if (!left.empty()) {
      if (cfg.final_fill == FinalFill::None)
        fail(ErrorCode::IncompleteSample, "mask tokens left and final fill disabled");
      const DenoiserOutput pred = denoiser.predict(xt, cfg.t_end);
      TokenSequence filled = xt;
      for (std::size_t d : left) {
        filled[d] = cfg.final_fill == FinalFill::Argmax
                        ? argmax_token(pred.probs[d])
                        : draw_data_token(pred.probs[d], rng);
      }
      record_changes(trajectory, &per_dim, xt, filled, cfg.t_end, 1.0 - cfg.t_end);
      xt = std::move(filled);
    }
  }

  if (trajectory) trajectory->jump_count_per_dim = per_dim;
  out.jumps = 0;
  for (int c : per_dim) out.jumps += c;
  out.sample = std::move(xt);
  return out;
}

}  // namespace

namespace {
// Non-owning shared_ptr view for the temperature wrapper.
std::shared_ptr<const Denoiser> borrow(const Denoiser& denoiser) {
  return std::shared_ptr<const Denoiser>(&denoiser, [](const Denoiser*) {});
}
}  // namespace

GenerateResult generate(const RatePlan& plan, const Denoiser& denoiser, int dims,
                        const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  GenerateResult result;
  std::shared_ptr<const Denoiser> tempered;
  const Denoiser* active = &denoiser;
  if (cfg.temperature != 1.0) {
    tempered = std::make_shared<TemperatureDenoiser>(borrow(denoiser), cfg.temperature);
    active = tempered.get();
  }
  RunOutput out = run_trajectory(plan, *active, dims, cfg, rng, &result.trajectory, -1.0);
  result.sample = std::move(out.sample);
  return result;
}

EulerKernelTable::EulerKernelTable(const RatePlan& plan, const Denoiser& denoiser,
                                   int dims, const SamplerConfig& cfg)
    : alphabet_(plan.flow->alphabet()), dims_(dims) {
  cfg.validate();
  const ConditionalFlow& flow = *plan.flow;
  n_states_ = state_space_size(dims, alphabet_.num_states());
  tokens_ = static_cast<std::size_t>(alphabet_.num_states());
  n_steps_ = std::max<long>(1, std::llround((cfg.t_end - cfg.t_start) / cfg.dt));
  dt_ = (cfg.t_end - cfg.t_start) / static_cast<double>(n_steps_);
  t_start_ = cfg.t_start;
  t_end_ = cfg.t_end;
  final_fill_ = cfg.final_fill;
  masking_ = flow.kind() == FlowKind::Masking;
  prior_ = flow.prior_row();

  const std::size_t kernel_size =
      static_cast<std::size_t>(n_steps_) * n_states_ * static_cast<std::size_t>(dims_) * tokens_;
  if (kernel_size > 200'000'000)
    fail(ErrorCode::Capacity, "kernel table too large");
  cumulative_.assign(kernel_size, 0.0);
  reachable_.assign(n_states_, 0);
  fill_.assign(n_states_ * static_cast<std::size_t>(dims_) * static_cast<std::size_t>(alphabet_.size_S), 0.0);

  const Denoiser* active = &denoiser;
  std::shared_ptr<const Denoiser> tempered;
  if (cfg.temperature != 1.0) {
    tempered = std::make_shared<TemperatureDenoiser>(borrow(denoiser), cfg.temperature);
    active = tempered.get();
  }

  for (std::size_t state_idx = 0; state_idx < n_states_; ++state_idx) {
    const TokenSequence state = decode_state(state_idx, dims_, alphabet_.num_states());
    try {
      for (long k = 0; k < n_steps_; ++k) {
        const double t = time_at(k);
        const DenoiserOutput pred = active->predict(state, t);
        for (int d = 0; d < dims_; ++d) {
          const RateRow row = unconditional_rate_row(plan, pred, t, state, d);
          const std::vector<double> probs = euler_step_probs(row, dt_);
          double* cum = cumulative_.data() + kernel_offset(k, state_idx, d);
          double acc = 0.0;
          for (std::size_t j = 0; j < tokens_; ++j) {
            acc += probs[j];
            cum[j] = acc;
          }
        }
      }
      const DenoiserOutput at_end = active->predict(state, t_end_);
      for (int d = 0; d < dims_; ++d)
        for (int s = 0; s < alphabet_.size_S; ++s)
          fill_[(state_idx * static_cast<std::size_t>(dims_) + static_cast<std::size_t>(d)) *
                    static_cast<std::size_t>(alphabet_.size_S) +
                static_cast<std::size_t>(s)] =
              at_end.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(s)];
      reachable_[state_idx] = 1;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::UnreachableState) throw;
    }
  }
}

std::vector<double> EulerKernelTable::step_row(long step_index,
                                               const TokenSequence& state,
                                               int dim) const {
  const std::size_t state_idx = encode_state(state, alphabet_.num_states());
  if (!reachable_[state_idx])
    fail(ErrorCode::UnreachableState, "state has zero mass under the flow");
  const double* cum = cumulative_.data() + kernel_offset(step_index, state_idx, dim);
  std::vector<double> probs(tokens_);
  double prev = 0.0;
  for (std::size_t j = 0; j < tokens_; ++j) {
    probs[j] = cum[j] - prev;
    prev = cum[j];
  }
  return probs;
}

BatchResult EulerKernelTable::sample(const BatchOptions& options) const {
  BatchResult result;
  result.samples.resize(static_cast<std::size_t>(options.count));
  result.jumps.resize(static_cast<std::size_t>(options.count));
  const bool keep_snapshots = options.snapshot_time >= 0.0;
  if (keep_snapshots) result.snapshots.resize(static_cast<std::size_t>(options.count));
  if (options.count == 0) return result;

  // First grid step at or past the snapshot time; the state is captured
  // before that step fires.
  long snapshot_step = -1;
  if (keep_snapshots) {
    snapshot_step = n_steps_;
    for (long k = 0; k < n_steps_; ++k) {
      if (time_at(k) >= options.snapshot_time - 1e-12) {
        snapshot_step = k;
        break;
      }
    }
  }

  int threads = options.threads > 0
                    ? options.threads
                    : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min<int>(threads, static_cast<int>(options.count)));

  std::exception_ptr first_error;
  std::mutex error_mutex;
  const Token mask = masking_ ? alphabet_.mask_code() : -1;
  const int s = alphabet_.size_S;

  const auto worker = [&](int worker_id) {
    try {
      TokenSequence state(static_cast<std::size_t>(dims_));
      for (long i = worker_id; i < options.count; i += threads) {
        Rng rng = Rng::substream(options.seed, static_cast<std::uint64_t>(i));
        for (int d = 0; d < dims_; ++d)
          state[static_cast<std::size_t>(d)] = rng.categorical(prior_);
        std::size_t state_idx = encode_state(state, alphabet_.num_states());
        long jumps = 0;
        for (long k = 0; k < n_steps_; ++k) {
          if (k == snapshot_step) result.snapshots[static_cast<std::size_t>(i)] = state;
          if (!reachable_[state_idx])
            fail(ErrorCode::UnreachableState, "state has zero mass under the flow");
          for (int d = 0; d < dims_; ++d) {
            const double* cum = cumulative_.data() + kernel_offset(k, state_idx, d);
            const double total = cum[tokens_ - 1];
            const double u = rng.uniform() * total;
            std::size_t j = 0;
            while (j + 1 < tokens_ && u >= cum[j]) ++j;
            const Token next = static_cast<Token>(j);
            const Token curr = state[static_cast<std::size_t>(d)];
            if (next != curr) {
              ++jumps;
              // Incremental mixed-radix update of the state index.
              std::size_t stride = 1;
              for (int e = dims_ - 1; e > d; --e) stride *= tokens_;
              state_idx += stride * static_cast<std::size_t>(next - curr);
              state[static_cast<std::size_t>(d)] = next;
            }
          }
        }
        if (keep_snapshots && snapshot_step == n_steps_)
          result.snapshots[static_cast<std::size_t>(i)] = state;
        if (masking_) {
          if (!reachable_[state_idx])
            fail(ErrorCode::UnreachableState, "state has zero mass under the flow");
          // All fills draw from the denoiser at the pre-fill state, matching
          // the generic path's single end-of-run prediction.
          const std::size_t fill_idx = state_idx;
          for (int d = 0; d < dims_; ++d) {
            if (state[static_cast<std::size_t>(d)] != mask) continue;
            if (final_fill_ == FinalFill::None)
              fail(ErrorCode::IncompleteSample,
                   "mask tokens left and final fill disabled");
            const double* row =
                fill_.data() +
                (fill_idx * static_cast<std::size_t>(dims_) + static_cast<std::size_t>(d)) *
                    static_cast<std::size_t>(s);
            Token pick = 0;
            if (final_fill_ == FinalFill::Argmax) {
              for (int j = 1; j < s; ++j)
                if (row[j] > row[pick]) pick = static_cast<Token>(j);
            } else {
              pick = rng.categorical(std::span<const double>(row, static_cast<std::size_t>(s)));
            }
            state[static_cast<std::size_t>(d)] = pick;
            ++jumps;
          }
        }
        result.samples[static_cast<std::size_t>(i)] = state;
        result.jumps[static_cast<std::size_t>(i)] = jumps;
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };

  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w) pool.emplace_back(worker, w);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return result;
}

BatchResult sample_batch(const RatePlan& plan, const Denoiser& denoiser, int dims,
                         const SamplerConfig& cfg, const BatchOptions& options) {
  cfg.validate();
  if (options.count < 0) fail(ErrorCode::BadInput, "negative sample count");
  BatchResult result;
  result.samples.resize(static_cast<std::size_t>(options.count));
  result.jumps.resize(static_cast<std::size_t>(options.count));
  const bool keep_snapshots = options.snapshot_time >= 0.0;
  if (keep_snapshots)
    result.snapshots.resize(static_cast<std::size_t>(options.count));
  if (options.count == 0) return result;

  const Denoiser* active = &denoiser;
  std::shared_ptr<const Denoiser> tempered;
  if (cfg.temperature != 1.0) {
    tempered = std::make_shared<TemperatureDenoiser>(borrow(denoiser), cfg.temperature);
    active = tempered.get();
  }

  int threads = options.threads > 0
                    ? options.threads
                    : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min<int>(threads, static_cast<int>(options.count)));

  std::exception_ptr first_error;
  std::mutex error_mutex;
  const auto worker = [&](int worker_id) {
    try {
      for (long i = worker_id; i < options.count; i += threads) {
        Rng rng = Rng::substream(options.seed, static_cast<std::uint64_t>(i));
        RunOutput out = run_trajectory(plan, *active, dims, cfg, rng, nullptr,
                                       options.snapshot_time);
        result.samples[static_cast<std::size_t>(i)] = std::move(out.sample);
        result.jumps[static_cast<std::size_t>(i)] = out.jumps;
        if (keep_snapshots)
          result.snapshots[static_cast<std::size_t>(i)] = std::move(out.snapshot);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };

  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w) pool.emplace_back(worker, w);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return result;
}

}  // namespace dflow
