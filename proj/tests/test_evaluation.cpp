#include <doctest.h>

#include <cmath>

#include "dflow/evaluation.hpp"
#include "dflow/sampler.hpp"
#include "test_support.hpp"

using namespace dflow;
using namespace dflow::testing;

TEST_SUITE("evaluation") {

TEST_CASE("total variation basics") {
  CHECK(tv_distance(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}) == 0.0);
  CHECK(tv_distance(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}) == 1.0);
  CHECK(tv_distance(std::vector<double>{0.6, 0.4}, std::vector<double>{0.5, 0.5}) ==
        doctest::Approx(0.1));
  CHECK_THROWS_AS((void)tv_distance(std::vector<double>{1.0},
                                    std::vector<double>{0.5, 0.5}),
                  Error);
}

TEST_CASE("total variation is a metric on random triples") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> p(5), q(5), r(5);
    double zp = 0, zq = 0, zr = 0;
    for (int i = 0; i < 5; ++i) {
      p[static_cast<std::size_t>(i)] = rng.uniform();
      q[static_cast<std::size_t>(i)] = rng.uniform();
      r[static_cast<std::size_t>(i)] = rng.uniform();
      zp += p[static_cast<std::size_t>(i)];
      zq += q[static_cast<std::size_t>(i)];
      zr += r[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < 5; ++i) {
      p[static_cast<std::size_t>(i)] /= zp;
      q[static_cast<std::size_t>(i)] /= zq;
      r[static_cast<std::size_t>(i)] /= zr;
    }
    const double pq = tv_distance(p, q);
    const double qp = tv_distance(q, p);
    const double pr = tv_distance(p, r);
    const double rq = tv_distance(r, q);
    CHECK(std::abs(pq - qp) < 1e-12);
    CHECK(pq <= pr + rq + 1e-12);
  }
}

TEST_CASE("token entropy") {
  SUBCASE("single repeated token") {
    const std::vector<TokenSequence> samples(10, TokenSequence{3, 3, 3});
    CHECK(sample_entropy(samples) == 0.0);
  }
  SUBCASE("balanced pair is one bit") {
    const std::vector<TokenSequence> samples = {{0, 1}, {1, 0}};
    CHECK(sample_entropy(samples) == doctest::Approx(1.0));
  }
  SUBCASE("3:1 split") {
    const std::vector<TokenSequence> samples = {{0, 0, 0, 1}};
    CHECK(sample_entropy(samples) == doctest::Approx(0.8112781).epsilon(1e-6));
  }
}

TEST_CASE("masking likelihood bound") {
  const Alphabet alphabet(2, true);
  const ConditionalFlow flow = ConditionalFlow::masking(alphabet);

  SUBCASE("point mass scores zero bits") {
    const DataDistribution dist = point_mass(alphabet, {1, 0, 1});
    const ExactPosteriorDenoiser posterior(dist, flow);
    Rng rng(7);
    const ElboEstimate est = masking_elbo(posterior, dist, flow, 4000, rng);
    CHECK(std::abs(est.bits_per_token) < 3 * est.stderr_ + 1e-9);
  }
  SUBCASE("fair coins cost one bit per token") {
    std::vector<WeightedSequence> entries;
    for (std::size_t idx = 0; idx < 16; ++idx)
      entries.push_back({decode_state(idx, 4, 2), 1.0 / 16.0});
    const DataDistribution dist = DataDistribution::tabular(alphabet, 4, entries);
    const ExactPosteriorDenoiser posterior(dist, flow);
    Rng rng(11);
    const ElboEstimate est = masking_elbo(posterior, dist, flow, 20000, rng);
    CHECK(std::abs(est.bits_per_token - 1.0) < 3 * est.stderr_);
  }
  SUBCASE("standard error shrinks like the square root of the budget") {
    const DataDistribution dist = bernoulli75(true);
    const ExactPosteriorDenoiser posterior(dist, flow);
    Rng rng(13);
    const ElboEstimate small = masking_elbo(posterior, dist, flow, 2000, rng);
    const ElboEstimate big = masking_elbo(posterior, dist, flow, 32000, rng);
    const double slope = std::log(small.stderr_ / big.stderr_) / std::log(16.0);
    CHECK(std::abs(slope - 0.5) < 0.1);  // within 20% of the 1/sqrt(n) law
  }
  SUBCASE("non-masking flows are rejected") {
    const Alphabet plain(2, false);
    const DataDistribution dist = bernoulli75();
    const ConditionalFlow uniform = ConditionalFlow::uniform(plain);
    const ExactPosteriorDenoiser posterior(dist, uniform);
    Rng rng(17);
    CHECK_THROWS_AS((void)masking_elbo(posterior, dist, uniform, 100, rng), Error);
  }
}

TEST_CASE("jump statistics") {
  SUBCASE("masking eta=0 makes exactly D jumps") {
    const Alphabet alphabet(3, true);
    const DataDistribution dist = structured_toy(true);
    const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
    const ExactPosteriorDenoiser posterior(dist, flow);
    const RatePlan plan(flow, 0.0, DbKind::None);
    SamplerConfig cfg;
    cfg.dt = 0.01;
    std::vector<Trajectory> trajectories;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      Rng rng(seed);
      trajectories.push_back(generate(plan, posterior, 3, cfg, rng).trajectory);
    }
    const JumpStats stats = jump_stats(trajectories);
    CHECK(stats.mean == doctest::Approx(3.0));
    CHECK(stats.variance == doctest::Approx(0.0));
    CHECK(stats.per_dim_mean.size() == 3);
    for (double m : stats.per_dim_mean) CHECK(m == doctest::Approx(1.0));
  }
  SUBCASE("no jumps, zero mean") {
    const std::vector<long> totals = {0, 0, 0};
    const JumpStats stats = jump_stats(totals);
    CHECK(stats.mean == 0.0);
    CHECK(stats.variance == 0.0);
  }
}

TEST_CASE("discrete-time absorbing equivalence") {
  Rng rng(23);
  std::vector<double> row(7);
  double z = 0.0;
  for (double& p : row) {
    p = rng.uniform(0.01, 1.0);
    z += p;
  }
  for (double& p : row) p /= z;

  CHECK(d3pm_equivalence_check(10, 1, row) < 1e-9);
  CHECK(d3pm_equivalence_check(1000, 500, row) < 1e-9);
  CHECK(d3pm_equivalence_check(1000, 999, row) < 1e-9);
}

TEST_CASE("kolmogorov residual") {
  const Alphabet alphabet(4, true);
  const ConditionalFlow flow = ConditionalFlow::masking(alphabet);
  std::vector<double> grid;
  for (int k = 0; k <= 18; ++k) grid.push_back(0.05 + 0.05 * k);

  SUBCASE("minimal-jump rate satisfies the balance identity") {
    const RatePlan plan(flow, 0.0, DbKind::None);
    CHECK(kolmogorov_residual(plan, 2, grid) < 1e-10);
  }
  SUBCASE("added stochasticity leaves the identity intact") {
    const RatePlan plan(flow, 7.0, DbKind::Canonical);
    CHECK(kolmogorov_residual(plan, 2, grid) < 1e-10);
  }
  SUBCASE("a corrupted rate is detected") {
    // Same contraction computed test-side with one rate entry bumped.
    const RatePlan plan(flow, 0.0, DbKind::None);
    const int n = alphabet.num_states();
    double worst = 0.0;
    for (double t : grid) {
      const std::vector<double> p = flow.prob_row(t, 2);
      const std::vector<double> dp = flow.prob_dt_row(t, 2);
      std::vector<double> balance(static_cast<std::size_t>(n), 0.0);
      for (Token i = 0; i < n; ++i) {
        RateRow row = conditional_rate_row(plan, t, i, 2);
        if (i == alphabet.mask_code()) {
          row.rates[0] += 0.1;  // injected fault
          row.set_diagonal();
        }
        for (int j = 0; j < n; ++j)
          balance[static_cast<std::size_t>(j)] +=
              row.rates[static_cast<std::size_t>(j)] * p[static_cast<std::size_t>(i)];
      }
      for (int j = 0; j < n; ++j)
        worst = std::max(worst, std::abs(dp[static_cast<std::size_t>(j)] -
                                         balance[static_cast<std::size_t>(j)]));
    }
    CHECK(worst >= 0.05);
  }
}

TEST_CASE("report serialization") {
  EvalReport report;
  report.seed = 42;
  report.config_hash = "cafe";
  report.sample_count = 100;
  report.set("tv_data", 0.013, 0.002, 100);
  report.set("entropy_bits", 1.5);
  const nlohmann::json j = report.to_json();
  CHECK(j["metrics"]["tv_data"]["value"] == doctest::Approx(0.013));
  CHECK(j["seed"] == 42);
  const std::string csv = report.to_csv();
  CHECK(csv.find("entropy_bits,1.5") != std::string::npos);
  int lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 3);  // header + two metrics
  CHECK_THROWS_AS(report.set("bad", std::numeric_limits<double>::infinity()), Error);
}

}  // TEST_SUITE
