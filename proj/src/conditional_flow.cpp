#include "dflow/conditional_flow.hpp"

#include <cmath>
#include <cstdlib>

namespace dflow {

namespace {
constexpr double kRowSumTol = 1e-12;
constexpr double kPriorTol = 1e-9;
constexpr double kFiniteDiffH = 1e-6;
}  // namespace

const char* to_string(FlowKind kind) {
  switch (kind) {
    case FlowKind::Masking: return "masking";
    case FlowKind::Uniform: return "uniform";
    case FlowKind::GeneralTabular: return "general_tabular";
  }
  return "?";
}

ConditionalFlow::ConditionalFlow(FlowKind kind, Alphabet alphabet,
                                 ScheduleFn schedule, ScheduleFn schedule_dt)
    : kind_(kind),
      alphabet_(alphabet),
      schedule_(std::move(schedule)),
      schedule_dt_(std::move(schedule_dt)) {}

ConditionalFlow ConditionalFlow::masking(const Alphabet& alphabet) {
  if (!alphabet.mask_enabled)
    fail(ErrorCode::InvalidAlphabet, "masking flow requires a mask symbol");
  return ConditionalFlow(FlowKind::Masking, alphabet, nullptr, nullptr);
}

ConditionalFlow ConditionalFlow::uniform(const Alphabet& alphabet) {
  return ConditionalFlow(FlowKind::Uniform, alphabet, nullptr, nullptr);
}

ConditionalFlow ConditionalFlow::general(const Alphabet& alphabet,
                                         ScheduleFn schedule,
                                         ScheduleFn schedule_dt) {
  if (!schedule) fail(ErrorCode::InvalidSchedule, "general flow needs a schedule");
  ConditionalFlow flow(FlowKind::GeneralTabular, alphabet, std::move(schedule),
                       std::move(schedule_dt));
  flow.validate_schedule();
  return flow;
}

void ConditionalFlow::validate_schedule() const {
  const int n = alphabet_.num_states();
  const std::vector<double> prior = schedule_(0.0, 0);
  for (Token x1 = 0; x1 < alphabet_.size_S; ++x1) {
    // Prior must not depend on the conditioning datapoint.
    const std::vector<double> at0 = schedule_(0.0, x1);
    if (static_cast<int>(at0.size()) != n)
      fail(ErrorCode::InvalidSchedule, "schedule row has wrong length");
    for (int j = 0; j < n; ++j) {
      if (std::abs(at0[j] - prior[j]) > kPriorTol)
        fail(ErrorCode::InvalidSchedule, "t=0 schedule depends on x1");
    }
    for (int step = 0; step <= 20; ++step) {
      const double t = kTimeEps + (1.0 - 2.0 * kTimeEps) * step / 20.0;
      const std::vector<double> row = schedule_(t, x1);
      if (static_cast<int>(row.size()) != n)
        fail(ErrorCode::InvalidSchedule, "schedule row has wrong length");
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        if (row[j] < -kRowSumTol)
          fail(ErrorCode::InvalidSchedule, "negative schedule probability");
        sum += row[j];
      }
      if (std::abs(sum - 1.0) > kRowSumTol)
        fail(ErrorCode::InvalidSchedule, "schedule row does not sum to 1");
      // Dead states must stay dead (zero mass implies zero derivative).
      if (t > kTimeEps && t < 1.0 - kTimeEps) {
        for (int j = 0; j < n; ++j) {
          if (row[j] < kRowSumTol && std::abs(prob_dt(t, x1, j)) > 1e-7)
            fail(ErrorCode::InvalidSchedule,
                 "zero-mass state with non-zero time derivative");
        }
      }
    }
    // Boundary interpolation, tolerance eps * S.
    const double tol = kTimeEps * alphabet_.size_S;
    const std::vector<double> near0 = schedule_(kTimeEps, x1);
    const std::vector<double> near1 = schedule_(1.0 - kTimeEps, x1);
    for (int j = 0; j < n; ++j) {
      if (std::abs(near0[j] - prior[j]) > tol)
        fail(ErrorCode::InvalidSchedule, "schedule does not start at its prior");
      const double target = (j == x1) ? 1.0 : 0.0;
      if (std::abs(near1[j] - target) > tol)
        fail(ErrorCode::InvalidSchedule, "schedule does not converge on x1");
    }
  }
}

double ConditionalFlow::prob(double t, Token x1, Token xt) const {
  alphabet_.check_token(xt);
  alphabet_.check_token(x1);
  if (alphabet_.is_mask(x1))
    fail(ErrorCode::InvalidAlphabet, "conditioning token may not be the mask");
  if (!(t >= 0.0 && t <= 1.0)) fail(ErrorCode::TimeDomain, "time outside [0, 1]");
  switch (kind_) {
    case FlowKind::Masking:
      if (alphabet_.is_mask(xt)) return 1.0 - t;
      return xt == x1 ? t : 0.0;
    case FlowKind::Uniform: {
      if (alphabet_.is_mask(xt)) return 0.0;
      const double base = (1.0 - t) / alphabet_.size_S;
      return xt == x1 ? t + base : base;
    }
    case FlowKind::GeneralTabular:
      return schedule_(t, x1)[static_cast<std::size_t>(xt)];
  }
  return 0.0;
}

double ConditionalFlow::prob_dt(double t, Token x1, Token xt) const {
  alphabet_.check_token(xt);
  alphabet_.check_token(x1);
  if (alphabet_.is_mask(x1))
    fail(ErrorCode::InvalidAlphabet, "conditioning token may not be the mask");
  switch (kind_) {
    case FlowKind::Masking:
      if (alphabet_.is_mask(xt)) return -1.0;
      return xt == x1 ? 1.0 : 0.0;
    case FlowKind::Uniform: {
      if (alphabet_.is_mask(xt)) return 0.0;
      const double base = -1.0 / alphabet_.size_S;
      return xt == x1 ? 1.0 + base : base;
    }
    case FlowKind::GeneralTabular: {
      if (schedule_dt_) return schedule_dt_(t, x1)[static_cast<std::size_t>(xt)];
      const double h = kFiniteDiffH;
      const double lo = std::max(t - h, 0.0);
      const double hi = std::min(t + h, 1.0);
      const double plo = schedule_(lo, x1)[static_cast<std::size_t>(xt)];
      const double phi = schedule_(hi, x1)[static_cast<std::size_t>(xt)];
      return (phi - plo) / (hi - lo);
    }
  }
  return 0.0;
}

std::vector<double> ConditionalFlow::prob_row(double t, Token x1) const {
  if (kind_ == FlowKind::GeneralTabular) {
    alphabet_.check_token(x1);
    if (alphabet_.is_mask(x1))
      fail(ErrorCode::InvalidAlphabet, "conditioning token may not be the mask");
    return schedule_(t, x1);
  }
  const int n = alphabet_.num_states();
  std::vector<double> row(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] = prob(t, x1, j);
  return row;
}

std::vector<double> ConditionalFlow::prob_dt_row(double t, Token x1) const {
  if (kind_ == FlowKind::GeneralTabular && schedule_dt_) {
    alphabet_.check_token(x1);
    if (alphabet_.is_mask(x1))
      fail(ErrorCode::InvalidAlphabet, "conditioning token may not be the mask");
    return schedule_dt_(t, x1);
  }
  const int n = alphabet_.num_states();
  std::vector<double> row(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] = prob_dt(t, x1, j);
  return row;
}

std::vector<double> ConditionalFlow::prior_row() const {
  switch (kind_) {
    case FlowKind::Masking: {
      std::vector<double> row(static_cast<std::size_t>(alphabet_.num_states()), 0.0);
      row[static_cast<std::size_t>(alphabet_.mask_code())] = 1.0;
      return row;
    }
    case FlowKind::Uniform: {
      std::vector<double> row(static_cast<std::size_t>(alphabet_.num_states()), 0.0);
      for (int j = 0; j < alphabet_.size_S; ++j)
        row[static_cast<std::size_t>(j)] = 1.0 / alphabet_.size_S;
      return row;
    }
    case FlowKind::GeneralTabular:
      return schedule_(0.0, 0);
  }
  return {};
}

TokenSequence ConditionalFlow::sample_corrupted(double t, const TokenSequence& x1,
                                                Rng& rng) const {
  alphabet_.check_sequence(x1, /*allow_mask=*/false);
  TokenSequence xt(x1.size());
  switch (kind_) {
    case FlowKind::Masking: {
      const Token mask = alphabet_.mask_code();
      for (std::size_t d = 0; d < x1.size(); ++d)
        xt[d] = rng.uniform() < t ? x1[d] : mask;
      return xt;
    }
    case FlowKind::Uniform: {
      for (std::size_t d = 0; d < x1.size(); ++d)
        xt[d] = rng.uniform() < t ? x1[d] : rng.uniform_int(alphabet_.size_S);
      return xt;
    }
    case FlowKind::GeneralTabular: {
      for (std::size_t d = 0; d < x1.size(); ++d) {
        const std::vector<double> row = schedule_(t, x1[d]);
        xt[d] = rng.categorical(row);
      }
      return xt;
    }
  }
  return xt;
}

TokenSequence ConditionalFlow::sample_prior(int dims, Rng& rng) const {
  if (dims < 1) fail(ErrorCode::BadInput, "dims must be positive");
  TokenSequence x0(static_cast<std::size_t>(dims));
  switch (kind_) {
    case FlowKind::Masking: {
      const Token mask = alphabet_.mask_code();
      for (auto& tok : x0) tok = mask;
      return x0;
    }
    case FlowKind::Uniform:
      for (auto& tok : x0) tok = rng.uniform_int(alphabet_.size_S);
      return x0;
    case FlowKind::GeneralTabular: {
      const std::vector<double> prior = prior_row();
      for (auto& tok : x0) tok = rng.categorical(prior);
      return x0;
    }
  }
  return x0;
}

}  // namespace dflow
