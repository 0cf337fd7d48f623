#include <doctest.h>

#include <cmath>

#include "dflow/evaluation.hpp"
#include "dflow/mlp_denoiser.hpp"
#include "test_support.hpp"

using namespace dflow;
using namespace dflow::testing;

namespace {

CorruptedBatch fixed_batch(const DataDistribution& dist, const ConditionalFlow& flow,
                           int size, std::uint64_t seed) {
  TrainConfig cfg;
  Rng rng(seed);
  return draw_corrupted_batch(dist, flow, cfg, size, rng);
}

// Exact E[-log p*(x1^d | x_t)] under the corruption joint at fixed times:
// enumerate x_t states and the per-dimension posterior entropy.
double conditional_entropy_oracle(const DataDistribution& dist,
                                  const ConditionalFlow& flow,
                                  const ExactPosteriorDenoiser& posterior,
                                  std::span<const double> times) {
  const int n = flow.alphabet().num_states();
  const int dims = dist.dims();
  double total = 0.0;
  for (double t : times) {
    const std::vector<double> pt = dist.marginal_pt(flow, t);
    double at_t = 0.0;
    for (std::size_t idx = 0; idx < pt.size(); ++idx) {
      if (pt[idx] <= 0.0) continue;
      const TokenSequence xt = decode_state(idx, dims, n);
      const DenoiserOutput out = posterior.predict(xt, t);
      double h = 0.0;
      for (const auto& row : out.probs)
        for (double p : row)
          if (p > 0.0) h += -p * std::log(p);
      at_t += pt[idx] * h / dims;
    }
    total += at_t / static_cast<double>(times.size());
  }
  return total;
}

}  // namespace

TEST_SUITE("mlp") {

TEST_CASE("analytic gradient matches central finite differences") {
  const DataDistribution dist = correlated_pairs(true);
  const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
  MlpDenoiser mlp(dist.alphabet(), 2, 10, /*init_seed=*/5);

  // Both the plain loss and the optional 1/(1-t)-weighted variant go through
  // the gate.
  for (const bool weighted : {false, true}) {
    TrainConfig dcfg;
    dcfg.weight_inv_one_minus_t = weighted;
    Rng brng(99);
    const CorruptedBatch batch = draw_corrupted_batch(dist, flow, dcfg, 8, brng);

    std::vector<double> grad(mlp.param_count(), 0.0);
    mlp.loss_and_grad(batch, &grad);

    Rng pick(7);
    const double h = 1e-5;
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t i =
          static_cast<std::size_t>(pick.uniform_int(static_cast<int>(mlp.param_count())));
      const double saved = mlp.params()[i];
      mlp.params()[i] = saved + h;
      const double up = mlp.loss_and_grad(batch, nullptr);
      mlp.params()[i] = saved - h;
      const double down = mlp.loss_and_grad(batch, nullptr);
      mlp.params()[i] = saved;
      const double fd = (up - down) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
      CHECK(std::abs(fd - grad[i]) / denom < 1e-4);
    }
  }
}

TEST_CASE("cross-entropy of the exact posterior equals the conditional entropy") {
  const DataDistribution dist = correlated_pairs(true);
  const ConditionalFlow flow = ConditionalFlow::masking(dist.alphabet());
  const ExactPosteriorDenoiser posterior(dist, flow);

  // Freeze the Monte-Carlo time draws and reuse them in the oracle so only
  // the (x1, xt) sampling contributes noise.
  Rng trng(111);
  std::vector<double> times;
  for (int i = 0; i < 400; ++i) times.push_back(trng.uniform(kTimeEps, 1.0 - kTimeEps));

  Rng rng(112);
  std::vector<double> values;
  for (double t : times) {
    for (int rep = 0; rep < 25; ++rep) {
      const TokenSequence x1 = dist.sample(rng);
      const TokenSequence xt = flow.sample_corrupted(t, x1, rng);
      const DenoiserOutput out = posterior.predict(xt, t);
      double v = 0.0;
      for (std::size_t d = 0; d < x1.size(); ++d)
        v += -std::log(std::max(out.probs[d][static_cast<std::size_t>(x1[d])], 1e-300));
      values.push_back(v / static_cast<double>(x1.size()));
    }
  }
  const MeanVar mv = mean_var(values);
  const double oracle = conditional_entropy_oracle(dist, flow, posterior, times);
  CHECK(std::abs(mv.mean - oracle) < 3.0 * mv.se_mean + 1e-12);
}

TEST_CASE("point-mass data gives zero loss under the exact posterior") {
  const Alphabet alphabet(3, true);
  const DataDistribution dist = point_mass(alphabet, {2, 0, 1});
  const ConditionalFlow flow = ConditionalFlow::masking(alphabet);
  const ExactPosteriorDenoiser posterior(dist, flow);
  Rng rng(13);
  const std::vector<TokenSequence> batch(16, TokenSequence{2, 0, 1});
  CHECK(ce_loss(posterior, flow, batch, rng) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("training mechanics") {
  const DataDistribution dist = correlated_pairs(false);
  const ConditionalFlow flow = ConditionalFlow::uniform(dist.alphabet());
  SUBCASE("zero steps leave parameters untouched") {
    MlpDenoiser mlp(dist.alphabet(), 2, 8, 3);
    const std::vector<double> before = mlp.params();
    TrainConfig cfg;
    cfg.steps = 0;
    const std::vector<double> trace = train(mlp, dist, flow, cfg);
    CHECK(trace.empty());
    CHECK(mlp.params() == before);
  }
  SUBCASE("same seed, same trace") {
    TrainConfig cfg;
    cfg.steps = 50;
    cfg.batch_size = 16;
    cfg.seed = 77;
    MlpDenoiser a(dist.alphabet(), 2, 8, 3);
    MlpDenoiser b(dist.alphabet(), 2, 8, 3);
    const std::vector<double> ta = train(a, dist, flow, cfg);
    const std::vector<double> tb = train(b, dist, flow, cfg);
    CHECK(ta == tb);
    CHECK(a.params() == b.params());
  }
  SUBCASE("loss decreases on a learnable toy") {
    TrainConfig cfg;
    cfg.steps = 800;
    cfg.batch_size = 32;
    cfg.seed = 5;
    cfg.learning_rate = 0.05;
    MlpDenoiser mlp(dist.alphabet(), 2, 24, 3);
    const std::vector<double> trace = train(mlp, dist, flow, cfg);
    const auto window_mean = [&](std::size_t from, std::size_t to) {
      double acc = 0.0;
      for (std::size_t i = from; i < to; ++i) acc += trace[i];
      return acc / static_cast<double>(to - from);
    };
    CHECK(window_mean(trace.size() - 100, trace.size()) <= window_mean(0, 100));
  }
  SUBCASE("non-finite parameters raise the divergence error") {
    MlpDenoiser mlp(dist.alphabet(), 2, 8, 3);
    mlp.params()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.steps = 1;
    CHECK_THROWS_AS((void)train(mlp, dist, flow, cfg), Error);
  }
}

TEST_CASE("trained model approaches the exact posterior") {
  // Shortened rehearsal of the acceptance training run.
  const DataDistribution dist = correlated_pairs(false);
  const ConditionalFlow flow = ConditionalFlow::uniform(dist.alphabet());
  const ExactPosteriorDenoiser posterior(dist, flow);
  MlpDenoiser mlp(dist.alphabet(), 2, 32, 9);
  TrainConfig cfg;
  cfg.steps = 4000;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.04;
  cfg.seed = 1234;
  train(mlp, dist, flow, cfg);

  Rng rng(55);
  double worst_tv = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const double t = rng.uniform(0.05, 0.95);
    const TokenSequence x1 = dist.sample(rng);
    const TokenSequence xt = flow.sample_corrupted(t, x1, rng);
    const DenoiserOutput a = posterior.predict(xt, t);
    const DenoiserOutput b = mlp.predict(xt, t);
    for (int d = 0; d < 2; ++d)
      worst_tv = std::max(worst_tv, tv_distance(a.probs[static_cast<std::size_t>(d)],
                                                b.probs[static_cast<std::size_t>(d)]));
  }
  CHECK(worst_tv < 0.15);
}

TEST_CASE("checkpoint round trip") {
  const Alphabet alphabet(3, true);
  MlpDenoiser mlp(alphabet, 2, 12, 21);
  mlp.set_temperature(0.7);
  const nlohmann::json j = mlp.to_json("deadbeef");
  const MlpDenoiser back = MlpDenoiser::from_json(j);
  CHECK(back.params() == mlp.params());
  const TokenSequence xt = {3, 1};
  const DenoiserOutput a = mlp.predict(xt, 0.3);
  const DenoiserOutput b = back.predict(xt, 0.3);
  for (int d = 0; d < 2; ++d)
    for (int k = 0; k < 3; ++k)
      CHECK(a.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)] ==
            b.probs[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)]);
}

}  // TEST_SUITE
