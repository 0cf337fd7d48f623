#include "dflow/rate_matrix.hpp"

#include <algorithm>
#include <cmath>

namespace dflow {

namespace {
constexpr double kMassThreshold = 1e-12;

RateRow zero_row(Token from, int n) {
  RateRow row;
  row.from_tok = from;
  row.rates.assign(static_cast<std::size_t>(n), 0.0);
  return row;
}
}  // namespace

RatePlan::RatePlan(const ConditionalFlow& f, double eta_, DbKind db)
    : flow(&f), eta(eta_), db_kind(db) {
  if (eta < 0.0) fail(ErrorCode::BadInput, "eta must be non-negative");
  if (eta > 0.0 && db_kind == DbKind::None)
    fail(ErrorCode::IncompatibleConfig, "eta > 0 requires a detailed-balance rate");
}

RateRow r_star_row(const ConditionalFlow& flow, double t, Token xt_tok, Token x1_tok) {
  const double tc = clamp_time(t);
  const int n = flow.alphabet().num_states();
  flow.alphabet().check_token(xt_tok);
  RateRow row = zero_row(xt_tok, n);

  const std::vector<double> p = flow.prob_row(tc, x1_tok);
  const double p_at = p[static_cast<std::size_t>(xt_tok)];
  if (p_at <= kMassThreshold) return row;

  int zt = 0;
  for (int j = 0; j < n; ++j)
    if (p[static_cast<std::size_t>(j)] > kMassThreshold) ++zt;

  const std::vector<double> dp = flow.prob_dt_row(tc, x1_tok);
  const double dp_at = dp[static_cast<std::size_t>(xt_tok)];
  for (int j = 0; j < n; ++j) {
    if (j == xt_tok || p[static_cast<std::size_t>(j)] <= kMassThreshold) continue;
    const double num = dp[static_cast<std::size_t>(j)] - dp_at;
    if (num > 0.0) row.rates[static_cast<std::size_t>(j)] = num / (zt * p_at);
  }
  row.set_diagonal();
  return row;
}

RateRow r_db_row(const ConditionalFlow& flow, double t, Token xt_tok, Token x1_tok) {
  const double tc = clamp_time(t);
  const Alphabet& alphabet = flow.alphabet();
  const int n = alphabet.num_states();
  alphabet.check_token(xt_tok);
  RateRow row = zero_row(xt_tok, n);

  switch (flow.kind()) {
    case FlowKind::Masking: {
      const Token mask = alphabet.mask_code();
      if (xt_tok == x1_tok) {
        row.rates[static_cast<std::size_t>(mask)] = 1.0;
      } else if (xt_tok == mask) {
        row.rates[static_cast<std::size_t>(x1_tok)] = tc / (1.0 - tc);
      }
      break;
    }
    case FlowKind::Uniform: {
      if (alphabet.is_mask(xt_tok)) break;  // dead state under the uniform flow
      const double back = (alphabet.size_S * tc + 1.0 - tc) / (1.0 - tc);
      if (xt_tok == x1_tok) {
        for (int j = 0; j < alphabet.size_S; ++j)
          if (j != xt_tok) row.rates[static_cast<std::size_t>(j)] = 1.0;
      } else {
        row.rates[static_cast<std::size_t>(x1_tok)] = back;
      }
      break;
    }
    case FlowKind::GeneralTabular: {
      const std::vector<double> p = flow.prob_row(tc, x1_tok);
      const double p_at = p[static_cast<std::size_t>(xt_tok)];
      if (p_at <= kMassThreshold) break;
      for (int j = 0; j < n; ++j) {
        if (j == xt_tok || p[static_cast<std::size_t>(j)] <= kMassThreshold) continue;
        row.rates[static_cast<std::size_t>(j)] =
            xt_tok < j ? 1.0 : p[static_cast<std::size_t>(j)] / p_at;
      }
      break;
    }
  }
  row.set_diagonal();
  return row;
}

RateRow conditional_rate_row(const RatePlan& plan, double t, Token xt_tok, Token x1_tok) {
  RateRow row = r_star_row(*plan.flow, t, xt_tok, x1_tok);
  if (plan.eta > 0.0) {
    if (plan.db_kind == DbKind::None)
      fail(ErrorCode::NotAvailable, "no detailed-balance rate configured");
    const RateRow db = r_db_row(*plan.flow, t, xt_tok, x1_tok);
    for (std::size_t j = 0; j < row.rates.size(); ++j)
      if (static_cast<Token>(j) != xt_tok) row.rates[j] += plan.eta * db.rates[j];
    row.set_diagonal();
  }
  return row;
}

RateRow unconditional_rate_row(const RatePlan& plan, const DenoiserOutput& denoised,
                               double t, const TokenSequence& xt, int dim) {
  const Alphabet& alphabet = plan.flow->alphabet();
  const int n = alphabet.num_states();
  const int s = alphabet.size_S;
  if (dim < 0 || dim >= denoised.dims())
    fail(ErrorCode::BadInput, "dimension out of range");
  const std::vector<double>& probs = denoised.probs[static_cast<std::size_t>(dim)];
  if (static_cast<int>(probs.size()) != s)
    fail(ErrorCode::InvalidDenoiser, "denoiser row must cover exactly the data tokens");

  const Token xt_tok = xt[static_cast<std::size_t>(dim)];
  RateRow row = zero_row(xt_tok, n);
  for (Token x1 = 0; x1 < s; ++x1) {
    const double w = probs[static_cast<std::size_t>(x1)];
    if (w <= 0.0) {
      if (w < 0.0 || !std::isfinite(w))
        fail(ErrorCode::InvalidDenoiser, "denoiser row with bad probability");
      continue;
    }
    const RateRow cond = conditional_rate_row(plan, t, xt_tok, x1);
    for (std::size_t j = 0; j < row.rates.size(); ++j)
      if (static_cast<Token>(j) != xt_tok) row.rates[j] += w * cond.rates[j];
  }
  row.set_diagonal();
  return row;
}

double db_residual(const ConditionalFlow& flow, double t, Token x1_tok,
                   const std::function<RateRow(Token)>& row_fn) {
  const double tc = clamp_time(t);
  const int n = flow.alphabet().num_states();
  const std::vector<double> p = flow.prob_row(tc, x1_tok);
  std::vector<RateRow> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (Token i = 0; i < n; ++i) rows.push_back(row_fn(i));

  double worst = 0.0;
  for (Token i = 0; i < n; ++i) {
    for (Token j = i + 1; j < n; ++j) {
      const double flux_ij = p[static_cast<std::size_t>(i)] *
                             rows[static_cast<std::size_t>(i)].rates[static_cast<std::size_t>(j)];
      const double flux_ji = p[static_cast<std::size_t>(j)] *
                             rows[static_cast<std::size_t>(j)].rates[static_cast<std::size_t>(i)];
      worst = std::max(worst, std::abs(flux_ij - flux_ji));
    }
  }
  return worst;
}

}  // namespace dflow
