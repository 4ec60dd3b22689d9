#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ulfs/density.hpp"
#include "ulfs/error.hpp"
#include "ulfs/numeric.hpp"

namespace ulfs {

enum class Target { ATE, RR, OR };

inline constexpr Target kAllTargets[] = {Target::ATE, Target::RR, Target::OR};

inline std::string to_string(Target t) {
  switch (t) {
    case Target::ATE: return "ATE";
    case Target::RR: return "RR";
    case Target::OR: return "OR";
  }
  return "?";
}

inline Target parse_target(const std::string& s) {
  if (s == "ATE" || s == "ate") return Target::ATE;
  if (s == "RR" || s == "rr") return Target::RR;
  if (s == "OR" || s == "or") return Target::OR;
  throw InputError("unknown target '" + s + "' (expected ATE|RR|OR)");
}

/// mu_a = E[Y^a] and the three contrasts built from them.
struct TargetEstimates {
  double mu0 = 0.0;
  double mu1 = 0.0;
  double ate = 0.0;
  double rr = 0.0;
  double or_ = 0.0;

  double get(Target t) const {
    switch (t) {
      case Target::ATE: return ate;
      case Target::RR: return rr;
      case Target::OR: return or_;
    }
    return 0.0;
  }
};

inline TargetEstimates make_targets(double mu0, double mu1) {
  if (!(mu0 > 0.0 && mu0 < 1.0) || !(mu1 > 0.0 && mu1 < 1.0)) {
    throw NumericalError("risk ratio / odds ratio undefined: mean potential outcome on the boundary of (0,1)");
  }
  TargetEstimates t;
  t.mu0 = mu0;
  t.mu1 = mu1;
  t.ate = mu1 - mu0;
  t.rr = mu1 / mu0;
  t.or_ = (mu1 / (1.0 - mu1)) / (mu0 / (1.0 - mu0));
  return t;
}

/// Mass of covariate group i under the working density's X-marginal.
inline double x_marginal(const WorkingDensity& d, std::size_t i) {
  return d.mode() == NormalizationMode::XMarginalFixed ? 1.0 / static_cast<double>(d.n_groups()) : d.group_mass(i);
}

/// mu_a(P) = sum_i P_X(X_i) Qbar(a, X_i).
inline double mu_a(const WorkingDensity& d, int a) {
  std::vector<double> terms(d.n_groups());
  for (std::size_t i = 0; i < d.n_groups(); ++i) terms[i] = x_marginal(d, i) * conditional_outcome_mean(d, a, i);
  return pairwise_sum(terms);
}

inline TargetEstimates estimate_targets(const WorkingDensity& d) { return make_targets(mu_a(d, 0), mu_a(d, 1)); }

/// AIPW influence function of mu_a at the working density, evaluated on the sample.
inline std::vector<double> eif_mu_a(const WorkingDensity& d, const Sample& sample, int a) {
  if (sample.size() != d.n_groups()) throw DomainError("sample does not match the density's covariate groups");
  const double mu = mu_a(d, a);
  const double min_g = d.floor() * d.floor();
  std::vector<double> phi(sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double q = conditional_outcome_mean(d, a, i);
    double ipw = 0.0;
    if (sample[i].a == a) {
      const double g = conditional_treatment_prob(d, a, i);
      if (!(g >= min_g)) throw NumericalError("propensity below floor^2 in influence function");
      ipw = (static_cast<double>(sample[i].y) - q) / g;
    }
    phi[i] = ipw + q - mu;
  }
  return phi;
}

/// Delta-method gradient of a target with respect to (mu0, mu1).
inline std::pair<double, double> target_gradient(Target t, double mu0, double mu1) {
  switch (t) {
    case Target::ATE: return {-1.0, 1.0};
    case Target::RR: return {-mu1 / (mu0 * mu0), 1.0 / mu0};
    case Target::OR: {
      const double orv = (mu1 / (1.0 - mu1)) / (mu0 / (1.0 - mu0));
      return {-orv / (mu0 * (1.0 - mu0)), orv / (mu1 * (1.0 - mu1))};
    }
  }
  return {0.0, 0.0};
}

/// Efficient influence function of a target at the working density.
inline std::vector<double> eif_target(const WorkingDensity& d, const Sample& sample, Target which) {
  const auto est = estimate_targets(d);
  const auto phi0 = eif_mu_a(d, sample, 0);
  const auto phi1 = eif_mu_a(d, sample, 1);
  const auto [c0, c1] = target_gradient(which, est.mu0, est.mu1);
  std::vector<double> out(phi0.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = which == Target::ATE ? phi1[i] - phi0[i] : c1 * phi1[i] + c0 * phi0[i];
  }
  return out;
}

}  // namespace ulfs
