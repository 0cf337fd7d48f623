#pragma once

#include <functional>
#include <vector>

#include "dflow/alphabet.hpp"
#include "dflow/conditional_flow.hpp"
#include "dflow/denoiser.hpp"

namespace dflow {

// One row of a conditional rate matrix. rates covers every alphabet state;
// off-diagonal entries are non-negative jump rates per unit time and the
// diagonal holds minus their sum, so the row sums to zero.
struct RateRow {
  Token from_tok = 0;
  std::vector<double> rates;

  double off_diagonal_sum() const {
    double sum = 0.0;
    for (std::size_t j = 0; j < rates.size(); ++j)
      if (static_cast<Token>(j) != from_tok) sum += rates[j];
    return sum;
  }
  void set_diagonal() { rates[static_cast<std::size_t>(from_tok)] = -off_diagonal_sum(); }
};

enum class DbKind { None, Canonical };

// Which conditional rate to simulate with: the minimal-jump base rate plus
// eta times a detailed-balance rate. eta > 0 requires a detailed-balance kind.
struct RatePlan {
  const ConditionalFlow* flow = nullptr;
  double eta = 0.0;
  DbKind db_kind = DbKind::None;

  RatePlan(const ConditionalFlow& f, double eta_ = 0.0,
           DbKind db = DbKind::Canonical);
};

// Minimal-jump rate for p_{t|1}: for both masses positive,
//   ReLU(d/dt p(j) - d/dt p(xt)) / (Z_t p(xt)),
// with Z_t the number of states carrying mass (threshold 1e-12), and zero
// whenever either mass vanishes. Time is clamped to [eps, 1-eps].
RateRow r_star_row(const ConditionalFlow& flow, double t, Token xt_tok, Token x1_tok);

// Unit-stochasticity detailed-balance rate (caller scales by eta):
//  - masking: x1 -> M at 1, M -> x1 at t/(1-t);
//  - uniform: x1 -> j at 1, i -> x1 at (S t + 1 - t)/(1-t);
//  - general: upper triangle 1, lower triangle p(j)/p(i), zero on dead states.
RateRow r_db_row(const ConditionalFlow& flow, double t, Token xt_tok, Token x1_tok);

// r_star_row + eta * r_db_row with the diagonal recomputed.
RateRow conditional_rate_row(const RatePlan& plan, double t, Token xt_tok, Token x1_tok);

// Expectation of conditional_rate_row over the denoiser's dimension-d
// clean-token distribution.
RateRow unconditional_rate_row(const RatePlan& plan, const DenoiserOutput& denoised,
                               double t, const TokenSequence& xt, int dim);

// max_{i,j} | p(i) R(i,j) - p(j) R(j,i) | for the rate rows produced by
// row_fn; zero exactly when the rate is in detailed balance with p_{t|1}.
double db_residual(const ConditionalFlow& flow, double t, Token x1_tok,
                   const std::function<RateRow(Token)>& row_fn);

}  // namespace dflow
