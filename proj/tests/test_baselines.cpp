#include <gtest/gtest.h>

#include <cmath>

#include "flow_fixtures.hpp"
#include "test_util.hpp"
#include "ulfs/baselines.hpp"

using namespace ulfs;
using namespace ulfs::testing;

TEST(InitialPlugin, UniformDensityAndAgreementWithTargets) {
  const Sample s{{{0.1}, 0, 1}, {{0.9}, 1, 0}};
  const WorkingDensity u(WorkingDensity::make_support(covariates_of(s)), std::vector<double>(8, 0.125), 1e-3,
                         NormalizationMode::Global);
  const auto r = initial_plugin(u);
  EXPECT_EQ(r.estimates.ate, 0.0);
  EXPECT_EQ(r.estimates.rr, 1.0);
  EXPECT_EQ(r.estimates.or_, 1.0);

  Rng rng(3);
  const auto s2 = random_sample(rng, 20);
  const auto d = random_density(rng, s2, NormalizationMode::Global);
  const auto t = estimate_targets(d);
  const auto p = initial_plugin(d);
  EXPECT_EQ(p.estimates.ate, t.ate);
  EXPECT_EQ(p.estimates.or_, t.or_);
}

TEST(InitialPlugin, DiffersFromFlowedEstimate) {
  const auto setup = dgp_setup(dgp1(), 100, 12);
  const auto trace = run_flow(setup.initial, setup.sample, setup.kernel, unstopped(50));
  EXPECT_NE(initial_plugin(setup.initial).estimates.ate, estimate_targets(trace.final_density).ate);
}

TEST(OneStep, AddsEifMean) {
  Rng rng(4);
  const auto s = random_sample(rng, 30);
  const auto d = random_density(rng, s, NormalizationMode::XMarginalFixed);
  const auto init = initial_plugin(d);
  for (auto t : kAllTargets) {
    const auto os = one_step(d, s, t);
    EXPECT_NEAR(os.estimates.get(t) - init.estimates.get(t), mean(eif_target(d, s, t)), 1e-14);
  }
}

TEST(Tmle, ConvergesAndSolvesEifEquation) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (const auto& dgp : {dgp1(), dgp2()}) {
      const auto setup = dgp_setup(dgp, 300, seed, NormalizationMode::XMarginalFixed);
      const auto r = tmle_ate(setup.initial, setup.sample);
      EXPECT_TRUE(r.converged);
      EXPECT_LE(r.iterations, 20);
      EXPECT_LE(r.eif_residual, 1e-4);
      EXPECT_NEAR(r.estimates.ate, r.estimates.mu1 - r.estimates.mu0, 1e-15);
    }
  }
}

TEST(Tmle, FixedPointWhenEifAlreadySolved) {
  // Outcome regression equal to the within-arm sample means: the clever-covariate score is zero
  // when the propensity is constant.
  const Sample s{{{0.1}, 1, 1}, {{0.2}, 1, 0}, {{0.3}, 0, 1}, {{0.4}, 0, 0}, {{0.5}, 1, 1}, {{0.6}, 0, 0}};
  const double q1 = 2.0 / 3.0, q0 = 1.0 / 3.0, g = 0.5, n = 6.0;
  std::vector<double> w;
  for (std::size_t i = 0; i < s.size(); ++i) {
    w.insert(w.end(), {(1 - g) * (1 - q0) / n, (1 - g) * q0 / n, g * (1 - q1) / n, g * q1 / n});
  }
  const WorkingDensity d(WorkingDensity::make_support(covariates_of(s)), w, 1e-3, NormalizationMode::XMarginalFixed);
  const auto r = tmle_ate(d, s);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_NEAR(r.estimates.ate, initial_plugin(d).estimates.ate, 1e-8);
}

TEST(Tmle, ZeroFluctuationBudgetReturnsInitial) {
  const auto setup = dgp_setup(dgp1(), 100, 3, NormalizationMode::XMarginalFixed);
  TmleConfig cfg;
  cfg.max_fluct = 0;
  const auto r = tmle_ate(setup.initial, setup.sample, cfg);
  EXPECT_FALSE(r.converged);
  EXPECT_NEAR(r.estimates.ate, initial_plugin(setup.initial).estimates.ate, 1e-15);
}
