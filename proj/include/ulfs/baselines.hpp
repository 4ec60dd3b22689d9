#pragma once

// Comparator estimators: the un-flowed plug-in, one-step EIF correction, and a standard TMLE for
// the ATE with the clever covariate H(A, X) = (2A - 1) / g_A(X).

#include <cmath>
#include <string>
#include <vector>

#include "ulfs/density.hpp"
#include "ulfs/error.hpp"
#include "ulfs/numeric.hpp"
#include "ulfs/targets.hpp"

namespace ulfs {

struct BaselineResult {
  std::string method;
  TargetEstimates estimates;
  std::vector<Target> reported;  ///< Parameters this method actually targets.
  int iterations = 0;
  bool converged = true;
  double eif_residual = 0.0;     ///< |P_n[EIF]| at the returned fit (TMLE only).
};

inline BaselineResult initial_plugin(const WorkingDensity& d0) {
  return {"initial", estimate_targets(d0), {Target::ATE, Target::RR, Target::OR}, 0, true, 0.0};
}

/// Initial plug-in plus the empirical mean of the target's EIF. Other fields of `estimates`
/// stay at the plug-in values; only `which` is corrected.
inline BaselineResult one_step(const WorkingDensity& d0, const Sample& sample, Target which) {
  BaselineResult r{"one_step", estimate_targets(d0), {which}, 1, true, 0.0};
  const double correction = mean(eif_target(d0, sample, which));
  switch (which) {
    case Target::ATE: r.estimates.ate += correction; break;
    case Target::RR: r.estimates.rr += correction; break;
    case Target::OR: r.estimates.or_ += correction; break;
  }
  return r;
}

struct TmleConfig {
  int max_fluct = 20;
  double eps_tol = 1e-6;
  int newton_iters = 100;
};

/// TMLE for the ATE with offset logit(Qbar), fluctuation fit by one-dimensional MLE.
/// The X-marginal is the empirical one. mu0/mu1/rr/or in the result are plug-ins from the
/// fluctuated fit but only the ATE is targeted.
inline BaselineResult tmle_ate(const WorkingDensity& d0, const Sample& sample, const TmleConfig& cfg = {}) {
  const std::size_t n = sample.size();
  if (n != d0.n_groups()) throw DomainError("sample does not match the density's covariate groups");
  std::vector<double> q0(n), q1(n), h0(n), h1(n);
  for (std::size_t i = 0; i < n; ++i) {
    q0[i] = conditional_outcome_mean(d0, 0, i);
    q1[i] = conditional_outcome_mean(d0, 1, i);
    const double g1 = conditional_treatment_prob(d0, 1, i);
    const double g0 = conditional_treatment_prob(d0, 0, i);
    if (!(g0 > 0.0 && g1 > 0.0)) throw NumericalError("propensity must be bounded away from 0 for TMLE");
    h0[i] = -1.0 / g0;
    h1[i] = 1.0 / g1;
  }

  BaselineResult r{"tmle", {}, {Target::ATE}, 0, false, 0.0};
  for (int it = 0; it < cfg.max_fluct; ++it) {
    std::vector<double> off(n), h(n);
    for (std::size_t i = 0; i < n; ++i) {
      off[i] = logit(sample[i].a ? q1[i] : q0[i]);
      h[i] = sample[i].a ? h1[i] : h0[i];
    }
    double eps = 0.0;
    bool ok = false;
    for (int k = 0; k < cfg.newton_iters; ++k) {
      double score = 0.0, info = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double p = expit(off[i] + eps * h[i]);
        score += h[i] * (sample[i].y - p);
        info += h[i] * h[i] * p * (1.0 - p);
      }
      if (std::abs(score) / static_cast<double>(n) <= 1e-12) {
        ok = true;
        break;
      }
      if (!(info > 0.0)) break;
      eps += score / info;
      if (!std::isfinite(eps) || std::abs(eps) > 1e3) break;
    }
    r.iterations = it + 1;
    if (!ok) break;  // MLE diverged: report the last iterate, unconverged.
    for (std::size_t i = 0; i < n; ++i) {
      q0[i] = expit(logit(q0[i]) + eps * h0[i]);
      q1[i] = expit(logit(q1[i]) + eps * h1[i]);
    }
    if (std::abs(eps) <= cfg.eps_tol) {
      r.converged = true;
      break;
    }
  }

  std::vector<double> resid(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double qa = sample[i].a ? q1[i] : q0[i];
    const double ha = sample[i].a ? h1[i] : h0[i];
    resid[i] = ha * (sample[i].y - qa);
  }
  const double mu0 = mean(q0);
  const double mu1 = mean(q1);
  r.estimates = make_targets(mu0, mu1);
  // EIF mean = P_n[H (Y - Qbar*)] + P_n[Qbar*(1,X) - Qbar*(0,X)] - psi, and the last two cancel.
  r.eif_residual = std::abs(mean(resid));
  return r;
}

}  // namespace ulfs
