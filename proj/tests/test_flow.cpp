#include <gtest/gtest.h>

#include <cmath>

#include "flow_fixtures.hpp"
#include "test_util.hpp"
#include "ulfs/flow.hpp"

using namespace ulfs;
using namespace ulfs::testing;

namespace {

std::vector<double> naive_centered_gram(const CenteredKernel& ck, const Sample& s) {
  const std::size_t n = s.size();
  std::vector<double> g(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double mi = 0.0, mj = 0.0;
      for (std::size_t k = 0; k < ck.support().size(); ++k) {
        mi += ck.weights()[k] * gauss_kernel(s[i], ck.support()[k], ck.config());
        mj += ck.weights()[k] * gauss_kernel(s[j], ck.support()[k], ck.config());
      }
      g[i * n + j] = gauss_kernel(s[i], s[j], ck.config()) - mi * mj / ck.kappa();
    }
  }
  return g;
}

FlowState random_state(Rng& rng, std::size_t n, NormalizationMode mode = NormalizationMode::Global) {
  const auto s = random_sample(rng, n);
  const auto d = random_density(rng, s, mode);
  return make_flow_state(make_flow_problem(d, s, {0.3 + rng.uniform(), 1.0}), d);
}

}  // namespace

TEST(CenteredGram, PointMassGivesZero) {
  const Sample s{{{0.4}, 1, 0}};
  auto support = std::make_shared<std::vector<Observation>>(s);
  CenteredKernel ck({}, support, {1.0});
  const auto g = centered_gram(ck, s);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_NEAR(g[0], 0.0, 1e-15);
}

TEST(CenteredGram, MatchesElementwiseOracleAndIsSymmetric) {
  Rng rng(31);
  const auto s = random_sample(rng, 3);
  const auto d = random_density(rng, s, NormalizationMode::Global);
  CenteredKernel ck({0.6, 1.0}, d.atoms_ptr(), d.weights());
  const auto g = centered_gram(ck, s);
  const auto oracle = naive_centered_gram(ck, s);
  for (std::size_t k = 0; k < 9; ++k) EXPECT_NEAR(g[k], oracle[k], 1e-14);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(g[i * 3 + j], g[j * 3 + i]);
  }
  std::vector<std::size_t> atoms;
  for (std::size_t i = 0; i < 3; ++i) atoms.push_back(WorkingDensity::atom_index(i, s[i].a, s[i].y));
  const auto ga = centered_gram_atoms(ck, atoms);
  for (std::size_t k = 0; k < 9; ++k) EXPECT_NEAR(ga[k], g[k], 1e-14);
}

TEST(ComputeAlpha, ClosedForms) {
  EXPECT_EQ(compute_alpha(std::vector<double>(9, 0.0), 3), std::vector<double>(3, 0.0));
  const double g11 = 0.3, g12 = -0.1, g22 = 0.5;
  const auto a = compute_alpha(std::vector<double>{g11, g12, g12, g22}, 2);
  EXPECT_DOUBLE_EQ(a[0], (g11 + g12) / 2);
  EXPECT_DOUBLE_EQ(a[1], (g12 + g22) / 2);
  EXPECT_THROW(compute_alpha(std::vector<double>(5, 0.0), 2), DomainError);
}

TEST(ComputeAlpha, MatchesLoopOracle) {
  Rng rng(4);
  const std::size_t n = 17;
  std::vector<double> g(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) g[i * n + j] = g[j * n + i] = rng.normal();
  }
  const auto a = compute_alpha(g, n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += g[j * n + i];
    EXPECT_NEAR(a[j], s / n, 1e-13);
  }
}

TEST(DirectionAt, ZeroAlphaAndSinglePoint) {
  Rng rng(5);
  const auto s = random_sample(rng, 4);
  const auto d = random_density(rng, s, NormalizationMode::Global);
  CenteredKernel ck({}, d.atoms_ptr(), d.weights());
  for (const auto& o : d.atoms()) EXPECT_EQ(direction_at(ck, std::vector<double>(4, 0.0), s, o), 0.0);

  const Sample one{{{0.2}, 1, 1}};
  const auto d1 = random_density(rng, one, NormalizationMode::Global);
  CenteredKernel ck1({}, d1.atoms_ptr(), d1.weights());
  const auto alpha = compute_alpha(centered_gram(ck1, one), 1);
  EXPECT_NEAR(direction_at(ck1, alpha, one, one[0]), alpha[0] * centered_kernel_eval(ck1, one[0], one[0]), 1e-15);
  EXPECT_NEAR(empirical_score(alpha), alpha[0] * alpha[0], 1e-18);
}

TEST(EmpiricalScore, ClosedForms) {
  EXPECT_EQ(empirical_score(std::vector<double>(5, 0.0)), 0.0);
  EXPECT_DOUBLE_EQ(empirical_score(std::vector<double>(7, 1.0)), 1.0);
}

TEST(FlowIdentity, SamplePointDirectionIsScaledGramTimesAlpha) {
  Rng rng(77);
  for (int inst = 0; inst < 20; ++inst) {
    const auto st = random_state(rng, 2 + rng.next() % 15);
    const auto& s = st.problem->sample;
    const std::size_t n = s.size();
    double pn_d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double ga = 0.0;
      for (std::size_t j = 0; j < n; ++j) ga += st.gram[i * n + j] * st.alpha[j];
      const double d_direct = direction_at(*st.ck, st.alpha, s, s[i]);
      EXPECT_NEAR(d_direct, ga / n, 1e-12);
      EXPECT_NEAR(st.direction_at_atoms[st.problem->sample_atoms[i]], d_direct, 1e-12);
      pn_d += d_direct / n;
    }
    EXPECT_NEAR(st.score, pn_d, 1e-10);
    // s_t <= eps implies every |alpha_j| <= sqrt(n eps).
    for (double a : st.alpha) EXPECT_LE(std::abs(a), std::sqrt(n * st.score) * (1 + 1e-12));
  }
}

TEST(FlowIdentity, AtomDirectionsMatchDirectEvaluation) {
  Rng rng(78);
  const auto st = random_state(rng, 9);
  for (std::size_t k = 0; k < st.density.size(); ++k) {
    EXPECT_NEAR(st.direction_at_atoms[k],
                direction_at(*st.ck, st.alpha, st.problem->sample, st.density.atoms()[k]), 1e-13);
  }
}

TEST(EulerStep, ZeroDirectionIsIdentity) {
  Rng rng(9);
  auto st = random_state(rng, 6);
  std::fill(st.direction_at_atoms.begin(), st.direction_at_atoms.end(), 0.0);
  const auto next = euler_step(st, unstopped(1));
  for (std::size_t k = 0; k < st.density.size(); ++k) {
    EXPECT_NEAR(next.density.weights()[k], st.density.weights()[k], 1e-15);
  }
}

TEST(EulerStep, ZeroStepOnlyAdvancesIteration) {
  Rng rng(10);
  const auto st = random_state(rng, 6);
  const auto next = euler_step(st, unstopped(1, 0.0));
  for (std::size_t k = 0; k < st.density.size(); ++k) {
    EXPECT_NEAR(next.density.weights()[k], st.density.weights()[k], 1e-15);
  }
  EXPECT_EQ(next.t, st.t);
  EXPECT_EQ(next.iteration, 1);
  EXPECT_NEAR(next.score, st.score, 1e-15);
}

TEST(EulerStep, LogDensityMovesByTiltMinusNormalizer) {
  Rng rng(11);
  const auto st = random_state(rng, 8);
  const double delta = 0.05;
  const auto next = euler_step(st, unstopped(1, delta));
  double total = 0.0;
  for (std::size_t k = 0; k < st.density.size(); ++k) {
    total += st.density.weights()[k] * std::exp(delta * st.direction_at_atoms[k]);
  }
  for (std::size_t i = 0; i < 8; ++i) {
    const double d = st.direction_at_atoms[st.problem->sample_atoms[i]];
    EXPECT_NEAR(next.log_density[i] - st.log_density[i], delta * d - std::log(total), 1e-13);
  }
  EXPECT_NEAR(next.step_mass_drift, std::abs(total - 1.0), 1e-15);
}

TEST(EulerStep, OverflowingTiltThrows) {
  Rng rng(12);
  auto st = random_state(rng, 5);
  st.direction_at_atoms[0] = 0.5;
  EXPECT_THROW(euler_step(st, unstopped(1, 1e4)), NumericalError);
}

TEST(EulerStep, MassDriftIsSecondOrderInStep) {
  const auto setup = dgp_setup(dgp1(), 60, 5);
  const auto st = make_flow_state(make_flow_problem(setup.initial, setup.sample, setup.kernel), setup.initial);
  const double d1 = euler_step(st, unstopped(1, 0.02)).step_mass_drift;
  const double d2 = euler_step(st, unstopped(1, 0.01)).step_mass_drift;
  EXPECT_GT(d1 / d2, 3.0);
  EXPECT_LT(d1 / d2, 5.0);
}

TEST(RunFlow, WithoutRulesRunsExactlyMaxIters) {
  const auto setup = dgp_setup(dgp1(), 40, 1);
  const auto trace = run_flow(setup.initial, setup.sample, setup.kernel, unstopped(13));
  EXPECT_EQ(trace.iterations, 13);
  EXPECT_EQ(trace.records.size(), 14u);
  EXPECT_EQ(trace.reason, StopReason::MaxIters);
  EXPECT_FALSE(trace.converged);
}

TEST(RunFlow, ScoreTargetAlreadyMetStopsAtZero) {
  const auto setup = dgp_setup(dgp1(), 40, 2);
  auto fc = unstopped(50);
  fc.use_score_target = true;
  fc.delta_n = 1.0;
  const auto trace = run_flow(setup.initial, setup.sample, setup.kernel, fc);
  EXPECT_EQ(trace.iterations, 0);
  EXPECT_EQ(trace.reason, StopReason::ScoreTarget);
  EXPECT_TRUE(trace.converged);
  EXPECT_EQ(trace.final_density.weights(), setup.initial.weights());
}

TEST(RunFlow, ScoreTargetTakesPrecedenceOverRules) {
  const auto setup = dgp_setup(dgp1(), 40, 2);
  auto fc = unstopped(50);
  fc.use_score_target = true;
  fc.delta_n = 1.0;
  fc.stopping.enabled = {StopRule::SC3};
  fc.stopping.delta_alpha = 1.0;
  EXPECT_EQ(run_flow(setup.initial, setup.sample, setup.kernel, fc).reason, StopReason::ScoreTarget);
  fc.use_score_target = false;
  EXPECT_EQ(run_flow(setup.initial, setup.sample, setup.kernel, fc).reason, StopReason::SC3);
}

TEST(RunFlow, ScoreDecreasesOnDgp1) {
  const auto setup = dgp_setup(dgp1(), 300, 3, NormalizationMode::XMarginalFixed);
  const auto trace =
      run_flow(setup.initial, setup.sample, setup.kernel, unstopped(100, 0.01, NormalizationMode::XMarginalFixed));
  int decreasing = 0;
  for (std::size_t k = 1; k < trace.records.size(); ++k) decreasing += trace.records[k].score < trace.records[k - 1].score;
  EXPECT_GE(decreasing, 95);
  EXPECT_LT(trace.records.back().score, trace.records.front().score);
}

TEST(RunFlow, InvariantsHoldInBothModes) {
  for (auto mode : {NormalizationMode::Global, NormalizationMode::XMarginalFixed}) {
    const auto setup = dgp_setup(dgp2(), 80, 4, mode);
    auto fc = unstopped(60, 0.01, mode);
    fc.assert_invariants = true;
    const auto trace = run_flow(setup.initial, setup.sample, setup.kernel, fc);
    for (const auto& r : check_flow_invariants(trace)) EXPECT_TRUE(r.passed) << r.name;
  }
}

TEST(RunFlow, NegatedDirectionBreaksLyapunovMonotonicity) {
  const auto setup = dgp_setup(dgp1(), 60, 6);
  auto fc = unstopped(10);
  fc.direction_sign = -1.0;
  const auto trace = run_flow(setup.initial, setup.sample, setup.kernel, fc);
  const auto table = check_flow_invariants(trace);
  EXPECT_FALSE(table.front().passed);
  EXPECT_EQ(table.front().name, "lyapunov_monotonicity");
  EXPECT_EQ(table.front().first_failure, 1);
  fc.assert_invariants = true;
  try {
    run_flow(setup.initial, setup.sample, setup.kernel, fc);
    FAIL() << "expected an invariant violation";
  } catch (const InvariantViolation& e) {
    EXPECT_EQ(e.invariant(), "lyapunov_monotonicity");
    EXPECT_EQ(e.iteration(), 1);
  }
}

TEST(RunFlow, Deterministic) {
  const auto setup = dgp_setup(dgp1(), 50, 8);
  const auto a = run_flow(setup.initial, setup.sample, setup.kernel, unstopped(20));
  const auto b = run_flow(setup.initial, setup.sample, setup.kernel, unstopped(20));
  EXPECT_EQ(a.final_density.weights(), b.final_density.weights());
  EXPECT_EQ(to_json(a, false).dump(), to_json(b, false).dump());
}

TEST(RunFlow, TraceJson) {
  const auto setup = dgp_setup(dgp1(), 30, 9);
  auto fc = unstopped(3);
  fc.stopping.enabled = {StopRule::SC5};
  const auto j = to_json(run_flow(setup.initial, setup.sample, setup.kernel, fc));
  EXPECT_EQ(j.at("trace").size(), 4u);
  EXPECT_TRUE(j.contains("wall_seconds"));
  EXPECT_TRUE(j.at("trace")[1].at("sc_diagnostics").at("delta_p").is_number());
  EXPECT_TRUE(j.at("trace")[1].at("sc_diagnostics").at("eif_mean").is_number());
}

TEST(FlowConfig, Validation) {
  FlowConfig fc;
  fc.delta = -0.1;
  EXPECT_THROW(fc.validate(), DomainError);
  fc = FlowConfig{};
  fc.max_iters = 0;
  EXPECT_THROW(fc.validate(), DomainError);
  fc = FlowConfig{};
  fc.delta_n = 0.0;
  EXPECT_THROW(fc.validate(), DomainError);
}
