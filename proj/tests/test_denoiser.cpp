#include <doctest.h>

#include <cmath>

#include "dflow/denoiser.hpp"
#include "dflow/mlp_denoiser.hpp"
#include "test_support.hpp"

using namespace dflow;
using namespace dflow::testing;

TEST_SUITE("denoiser") {

TEST_CASE("binary posterior by Bayes") {
  const DataDistribution dist = bernoulli75();
  const ConditionalFlow flow = ConditionalFlow::uniform(dist.alphabet());
  const ExactPosteriorDenoiser denoiser(dist, flow);
  const DenoiserOutput out = denoiser.predict({0}, 0.5);
  CHECK(out.probs[0][0] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(out.probs[0][1] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("masking posterior is degenerate on observed tokens") {
  const DataDistribution dist = structured_toy(true);
  const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
  const ExactPosteriorDenoiser denoiser(dist, flow);
  const TokenSequence xt = {1, 2, 2};  // fully unmasked, in-support
  const DenoiserOutput out = denoiser.predict(xt, 0.4);
  for (int d = 0; d < 3; ++d)
    CHECK(out.probs[static_cast<std::size_t>(d)]
                   [static_cast<std::size_t>(xt[static_cast<std::size_t>(d)])] ==
          doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("posterior near t=1 is a point mass on the state") {
  const DataDistribution dist = structured_toy(false);
  for (const bool masking : {true, false}) {
    const DataDistribution d = masking ? structured_toy(true) : dist;
    const ConditionalFlow flow = masking ? ConditionalFlow::masking(d.alphabet())
                                         : ConditionalFlow::uniform(d.alphabet());
    const ExactPosteriorDenoiser denoiser(d, flow);
    const TokenSequence xt = {0, 1, 2};
    const DenoiserOutput out = denoiser.predict(xt, 1.0 - 1e-9);
    for (int dim = 0; dim < 3; ++dim)
      CHECK(out.probs[static_cast<std::size_t>(dim)]
                     [static_cast<std::size_t>(xt[static_cast<std::size_t>(dim)])] >
            1.0 - 1e-6);
  }
}

TEST_CASE("posterior rows normalize on random reachable states") {
  const DataDistribution dist = structured_toy(true);
  const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
  const ExactPosteriorDenoiser denoiser(dist, flow);
  Rng rng(51);
  for (int trial = 0; trial < 10000; ++trial) {
    const double t = rng.uniform(0.05, 0.95);
    const TokenSequence x1 = dist.sample(rng);
    const TokenSequence xt = flow.sample_corrupted(t, x1, rng);
    const DenoiserOutput out = denoiser.predict(xt, t);
    out.check_normalized(1e-9);
  }
}

TEST_CASE("law of total probability recovers the data marginals") {
  const DataDistribution dist = structured_toy(true);
  const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
  const ExactPosteriorDenoiser denoiser(dist, flow);
  const int n = dist.alphabet().num_states();
  const double t = 0.37;
  const std::vector<double> pt = dist.marginal_pt(flow, t);
  for (int d = 0; d < 3; ++d) {
    std::vector<double> acc(4, 0.0);
    for (std::size_t idx = 0; idx < pt.size(); ++idx) {
      if (pt[idx] <= 0.0) continue;
      const TokenSequence xt = decode_state(idx, 3, n);
      const DenoiserOutput out = denoiser.predict(xt, t);
      for (int k = 0; k < 4; ++k)
        acc[static_cast<std::size_t>(k)] +=
            pt[idx] * out.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)];
    }
    const std::vector<double> marginal = dist.dim_marginal(d);
    for (int k = 0; k < 4; ++k)
      CHECK(std::abs(acc[static_cast<std::size_t>(k)] -
                     marginal[static_cast<std::size_t>(k)]) < 1e-9);
  }
}

TEST_CASE("unreachable states are rejected") {
  const Alphabet alphabet(3, true);
  const DataDistribution dist = point_mass(alphabet, {1, 1});
  const ConditionalFlow flow = ConditionalFlow::masking(alphabet);
  const ExactPosteriorDenoiser denoiser(dist, flow);
  CHECK_THROWS_AS((void)denoiser.predict({0, 1}, 0.5), Error);
}

TEST_CASE("temperature scaling") {
  SUBCASE("identity at temperature 1") {
    const std::vector<std::vector<double>> logits = {{0.3, -1.2, 2.0}};
    const auto probs = apply_temperature(logits, 1.0);
    double z = 0.0;
    for (double l : logits[0]) z += std::exp(l);
    for (int k = 0; k < 3; ++k)
      CHECK(probs[0][static_cast<std::size_t>(k)] ==
            doctest::Approx(std::exp(logits[0][static_cast<std::size_t>(k)]) / z));
  }
  SUBCASE("softmax arithmetic at temperature 0.5") {
    const auto probs = apply_temperature({{std::log(2.0), 0.0}}, 0.5);
    CHECK(probs[0][0] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(probs[0][1] == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("low temperature sharpens to one-hot") {
    const auto probs = apply_temperature({{1.0, 0.2, -0.4}}, 1e-4);
    CHECK(probs[0][0] == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("temperature wrapper preserves zeros") {
    const DataDistribution dist = bernoulli75();
    const ConditionalFlow flow = ConditionalFlow::uniform(dist.alphabet());
    auto base = std::make_shared<ExactPosteriorDenoiser>(dist, flow);
    const TemperatureDenoiser hot(base, 0.5);
    const DenoiserOutput out = hot.predict({0}, 0.5);
    // (0.9, 0.1) at temperature 0.5 -> squared odds.
    const double z = 0.81 + 0.01;
    CHECK(out.probs[0][0] == doctest::Approx(0.81 / z));
    CHECK(out.probs[0][1] == doctest::Approx(0.01 / z));
  }
}

TEST_CASE("empirical CE is minimized by the exact posterior") {
  // Gibbs at the sample level: over frozen triples, no perturbed table beats
  // the true posterior computed on the same triples.
  const DataDistribution dist = correlated_pairs(true);
  const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
  const ExactPosteriorDenoiser exact(dist, flow);
  Rng rng(61);

  struct Triple {
    double t;
    TokenSequence xt;
    TokenSequence x1;
  };
  std::vector<Triple> triples;
  for (int i = 0; i < 5000; ++i) {
    const double t = rng.uniform(0.05, 0.95);
    const TokenSequence x1 = dist.sample(rng);
    triples.push_back({t, flow.sample_corrupted(t, x1, rng), x1});
  }
  const auto empirical_ce = [&](const Denoiser& denoiser) {
    double total = 0.0;
    for (const Triple& tr : triples) {
      const DenoiserOutput out = denoiser.predict(tr.xt, tr.t);
      for (std::size_t d = 0; d < tr.x1.size(); ++d)
        total += -std::log(std::max(out.probs[d][static_cast<std::size_t>(tr.x1[d])], 1e-300));
    }
    return total / static_cast<double>(triples.size());
  };

  const double exact_ce = empirical_ce(exact);
  for (int perturbation = 0; perturbation < 50; ++perturbation) {
    const double scale = rng.uniform(0.05, 0.6);
    const std::uint64_t salt = rng.next_u64();
    const FunctionDenoiser perturbed(2, [&, scale, salt](const TokenSequence& xt, double t) {
      DenoiserOutput out = exact.predict(xt, t);
      Rng inner(salt ^ encode_state(xt, 3));
      for (auto& row : out.probs) {
        double z = 0.0;
        for (double& p : row) {
          p = std::max(p + scale * (inner.uniform() - 0.5), 1e-6);
          z += p;
        }
        for (double& p : row) p /= z;
      }
      return out;
    });
    CHECK(empirical_ce(perturbed) >= exact_ce - 1e-9);
  }
}

TEST_CASE("empirical table feeds the posterior") {
  // The empirical estimator is a tabular distribution built from samples;
  // its exact posterior approaches the true one as the sample count grows.
  const DataDistribution truth = correlated_pairs(true);
  const ConditionalFlow flow = ConditionalFlow::masking(truth.alphabet());
  Rng rng(81);
  std::vector<TokenSequence> draws;
  for (int i = 0; i < 20000; ++i) draws.push_back(truth.sample(rng));
  const DataDistribution empirical =
      DataDistribution::empirical(truth.alphabet(), 2, draws);
  const ExactPosteriorDenoiser exact(truth, flow);
  const ExactPosteriorDenoiser estimated(empirical, flow);
  for (const double t : {0.2, 0.5, 0.8}) {
    const TokenSequence xt = {2, 2};  // all masked: posterior = data marginals
    const DenoiserOutput a = exact.predict(xt, t);
    const DenoiserOutput b = estimated.predict(xt, t);
    for (int d = 0; d < 2; ++d)
      for (int k = 0; k < 2; ++k)
        CHECK(std::abs(a.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)] -
                       b.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)]) <
              0.02);
  }
}

TEST_CASE("tabulated denoiser matches its base on the grid") {
  const DataDistribution dist = structured_toy(true);
  const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
  const ExactPosteriorDenoiser exact(dist, flow);
  std::vector<double> grid;
  for (int k = 0; k < 10; ++k) grid.push_back(0.05 + 0.1 * k);
  const TabulatedDenoiser table(exact, dist.alphabet(), 3, grid);
  Rng rng(71);
  for (int trial = 0; trial < 200; ++trial) {
    const double t = grid[static_cast<std::size_t>(rng.uniform_int(10))];
    const TokenSequence x1 = dist.sample(rng);
    const TokenSequence xt = flow.sample_corrupted(t, x1, rng);
    const DenoiserOutput a = exact.predict(xt, t);
    const DenoiserOutput b = table.predict(xt, t);
    for (int d = 0; d < 3; ++d)
      for (int k = 0; k < 4; ++k)
        CHECK(a.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)] ==
              b.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)]);
  }
}

}  // TEST_SUITE
