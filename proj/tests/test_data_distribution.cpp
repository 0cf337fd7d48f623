#include <doctest.h>

#include <cmath>

#include "dflow/data_distribution.hpp"
#include "dflow/evaluation.hpp"
#include "test_support.hpp"

using namespace dflow;
using namespace dflow::testing;

TEST_SUITE("data") {

TEST_CASE("marginal table boundaries") {
  SUBCASE("t=1 reproduces the data table") {
    const DataDistribution dist = structured_toy(true);
    const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
    const std::vector<double> pt = dist.marginal_pt(flow, 1.0);
    const std::vector<double> data = dist.state_table();
    for (std::size_t i = 0; i < pt.size(); ++i) CHECK(std::abs(pt[i] - data[i]) < 1e-12);
  }
  SUBCASE("t=0 masking piles onto the all-mask state") {
    const DataDistribution dist = structured_toy(true);
    const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
    const std::vector<double> pt = dist.marginal_pt(flow, 0.0);
    const int n = dist.alphabet().num_states();
    const TokenSequence all_mask(3, dist.alphabet().mask_code());
    for (std::size_t i = 0; i < pt.size(); ++i) {
      const double expect = i == encode_state(all_mask, n) ? 1.0 : 0.0;
      CHECK(std::abs(pt[i] - expect) < 1e-12);
    }
  }
}

TEST_CASE("hand-enumerated binary marginal") {
  const DataDistribution dist = bernoulli75();
  const ConditionalFlow flow = ConditionalFlow::uniform(dist.alphabet());
  const std::vector<double> pt = dist.marginal_pt(flow, 0.5);
  // 0.75 (0.5 + 0.25) + 0.25 * 0.25 and the complement.
  CHECK(pt[0] == doctest::Approx(0.625).epsilon(1e-12));
  CHECK(pt[1] == doctest::Approx(0.375).epsilon(1e-12));
}

TEST_CASE("marginal conserves mass across a time grid") {
  const DataDistribution dist = structured_toy(true);
  const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
  for (int k = 0; k <= 10; ++k) {
    const double t = k / 10.0;
    const std::vector<double> pt = dist.marginal_pt(flow, t);
    double sum = 0.0;
    for (double p : pt) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("enumeration guard") {
  const Alphabet alphabet(10, false);
  std::vector<WeightedSequence> entries = {{TokenSequence(9, 0), 1.0}};
  const DataDistribution dist = DataDistribution::tabular(alphabet, 9, entries);
  const ConditionalFlow flow = ConditionalFlow::uniform(alphabet);
  CHECK_THROWS_AS((void)dist.marginal_pt(flow, 0.5), Error);  // 10^9 states
}

TEST_CASE("validation rejects bad tables") {
  const Alphabet alphabet(2, false);
  SUBCASE("mass off by more than 1e-12") {
    CHECK_THROWS_AS((void)DataDistribution::tabular(alphabet, 1,
                                                    {{{0}, 0.7}, {{1}, 0.2}}),
                    Error);
  }
  SUBCASE("mask token in support") {
    const Alphabet masked(2, true);
    CHECK_THROWS_AS((void)DataDistribution::tabular(masked, 1, {{{2}, 1.0}}), Error);
  }
}

TEST_CASE("json round trip") {
  const DataDistribution dist = structured_toy(false);
  const nlohmann::json j = dist.to_json();
  const DataDistribution back = DataDistribution::from_json(j, false);
  CHECK(back.to_json() == j);
  const std::vector<double> a = dist.state_table();
  const std::vector<double> b = back.state_table();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("empirical table merges duplicates") {
  const Alphabet alphabet(2, false);
  const std::vector<TokenSequence> samples = {{0, 1}, {0, 1}, {1, 1}, {0, 0}};
  const DataDistribution dist = DataDistribution::empirical(alphabet, 2, samples);
  CHECK(dist.support().size() == 3);
  double total = 0.0;
  for (const auto& e : dist.support()) total += e.p;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sampling matches the table") {
  const DataDistribution dist = bernoulli75();
  Rng rng(17);
  long zeros = 0;
  const long n = 20000;
  for (long i = 0; i < n; ++i)
    if (dist.sample(rng)[0] == 0) ++zeros;
  CHECK(std::abs(zeros / static_cast<double>(n) - 0.75) < 0.01);
}

}  // TEST_SUITE
