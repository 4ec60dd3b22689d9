#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ulfs/error.hpp"
#include "ulfs/numeric.hpp"
#include "ulfs/nuisance.hpp"
#include "ulfs/observation.hpp"

namespace ulfs {

/// How mass is restored after a tilt.
///   Global:          divide every weight by the total.
///   XMarginalFixed:  rescale each covariate group to 1/n, keeping P_n(X) fixed.
enum class NormalizationMode { Global, XMarginalFixed };

inline std::string to_string(NormalizationMode m) { return m == NormalizationMode::Global ? "global" : "xfixed"; }

inline NormalizationMode parse_normalization_mode(const std::string& s) {
  if (s == "global") return NormalizationMode::Global;
  if (s == "xfixed" || s == "x-marginal-fixed") return NormalizationMode::XMarginalFixed;
  throw InputError("unknown normalization mode '" + s + "' (expected global|xfixed)");
}

/// Discrete distribution on the 4n atoms {(X_i, a, y)}. Atom (i, a, y) lives at index 4i + 2a + y.
class WorkingDensity {
 public:
  WorkingDensity(std::shared_ptr<const std::vector<Observation>> atoms, std::vector<double> weights, double floor,
                 NormalizationMode mode)
      : atoms_(std::move(atoms)), weights_(std::move(weights)), floor_(floor), mode_(mode) {
    if (!atoms_ || atoms_->empty() || atoms_->size() % 4 != 0) {
      throw DomainError("working density support must hold four atoms per covariate value");
    }
    if (weights_.size() != atoms_->size()) throw DomainError("weights and atoms differ in length");
    for (double w : weights_) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("density weights must be finite and nonnegative");
    }
  }

  static std::size_t atom_index(std::size_t i, int a, int y) {
    return 4 * i + 2 * static_cast<std::size_t>(a) + static_cast<std::size_t>(y);
  }

  /// Support {(x_i, a, y)} in atom_index order.
  static std::shared_ptr<const std::vector<Observation>> make_support(const std::vector<std::vector<double>>& xs) {
    auto atoms = std::make_shared<std::vector<Observation>>();
    atoms->reserve(4 * xs.size());
    for (const auto& x : xs) {
      for (int a = 0; a < 2; ++a) {
        for (int y = 0; y < 2; ++y) atoms->push_back(Observation{x, a, y});
      }
    }
    return atoms;
  }

  std::size_t n_groups() const { return atoms_->size() / 4; }
  std::size_t size() const { return atoms_->size(); }
  std::size_t x_group(std::size_t atom) const { return atom / 4; }
  const std::vector<Observation>& atoms() const { return *atoms_; }
  const std::shared_ptr<const std::vector<Observation>>& atoms_ptr() const { return atoms_; }
  const std::vector<double>& weights() const { return weights_; }
  double weight(std::size_t i, int a, int y) const { return weights_[atom_index(i, a, y)]; }
  double floor() const { return floor_; }
  NormalizationMode mode() const { return mode_; }

  double group_mass(std::size_t i) const {
    const double* w = weights_.data() + 4 * i;
    return w[0] + w[1] + w[2] + w[3];
  }

  double total_mass() const { return pairwise_sum(weights_); }

  /// Same support, floor and mode; new weights.
  WorkingDensity with_weights(std::vector<double> weights) const {
    return WorkingDensity(atoms_, std::move(weights), floor_, mode_);
  }

 private:
  std::shared_ptr<const std::vector<Observation>> atoms_;
  std::vector<double> weights_;
  double floor_;
  NormalizationMode mode_;
};

namespace detail {

/// Clamp a probability to [floor, 1 - floor], with 1 - p >= floor guaranteed in floating point.
inline std::pair<double, double> floored_pair(double p1, double floor) {
  double hi = 1.0 - floor;
  while (1.0 - hi < floor) hi = std::nextafter(hi, 0.0);
  const double p = std::clamp(p1, floor, hi);
  return {1.0 - p, p};
}

}  // namespace detail

/// Rescales weights per the mode. Requires strictly positive weights.
inline WorkingDensity renormalize(const WorkingDensity& d, NormalizationMode mode) {
  std::vector<double> w = d.weights();
  for (double v : w) {
    if (!(v > 0.0)) throw DomainError("positivity violation: nonpositive weight before renormalization");
  }
  if (mode == NormalizationMode::Global) {
    const double total = pairwise_sum(w);
    for (auto& v : w) v /= total;
  } else {
    const double target = 1.0 / static_cast<double>(d.n_groups());
    for (std::size_t i = 0; i < d.n_groups(); ++i) {
      const double s = d.group_mass(i);
      for (std::size_t k = 4 * i; k < 4 * i + 4; ++k) w[k] = w[k] / s * target;
    }
  }
  return WorkingDensity(d.atoms_ptr(), std::move(w), d.floor(), mode);
}

/// p(x_i, a, y) = (1/n) e(a|x_i) q(y|a,x_i) with both conditionals clamped to [floor, 1 - floor].
inline WorkingDensity init_from_nuisance(const std::vector<std::vector<double>>& xs, const NuisanceFit& fit,
                                         double floor, NormalizationMode mode) {
  if (xs.size() < 2) throw DomainError("working density needs at least two covariate values");
  if (!(floor > 0.0 && floor < 0.25)) throw DomainError("floor must lie in (0, 0.25)");
  const double n = static_cast<double>(xs.size());
  std::vector<double> w(4 * xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double e1 = fit.prob_treated(xs[i]);
    if (!std::isfinite(e1)) throw NumericalError("non-finite propensity prediction");
    const auto [g0, g1] = detail::floored_pair(e1, floor);
    for (int a = 0; a < 2; ++a) {
      const double qa = fit.outcome_mean(xs[i], a);
      if (!std::isfinite(qa)) throw NumericalError("non-finite outcome prediction");
      const auto [q0, q1] = detail::floored_pair(qa, floor);
      const double ga = a ? g1 : g0;
      w[WorkingDensity::atom_index(i, a, 0)] = ga * q0 / n;
      w[WorkingDensity::atom_index(i, a, 1)] = ga * q1 / n;
    }
  }
  return WorkingDensity(WorkingDensity::make_support(xs), std::move(w), floor, mode);
}

/// log p at the observed atoms (i, A_i, Y_i), offset by log n.
inline std::vector<double> log_density_at_sample(const WorkingDensity& d, const Sample& sample) {
  if (sample.size() != d.n_groups()) throw DomainError("sample does not match the density's covariate groups");
  std::vector<double> out(sample.size());
  const double log_n = std::log(static_cast<double>(sample.size()));
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto k = WorkingDensity::atom_index(i, sample[i].a, sample[i].y);
    if (sample[i].a < 0 || sample[i].a > 1 || sample[i].y < 0 || sample[i].y > 1 || d.atoms()[k].x != sample[i].x) {
      throw DomainError("sample point " + std::to_string(i) + " is not an atom of the working density");
    }
    out[i] = std::log(d.weights()[k]) + log_n;
  }
  return out;
}

/// Qbar(a, X_i) = w(i,a,1) / (w(i,a,0) + w(i,a,1)).
inline double conditional_outcome_mean(const WorkingDensity& d, int a, std::size_t i) {
  const double w0 = d.weight(i, a, 0);
  const double w1 = d.weight(i, a, 1);
  const double den = w0 + w1;
  if (!(den > 0.0)) throw NumericalError("degenerate conditional: zero mass at (x_" + std::to_string(i) + ", a)");
  return w1 / den;
}

/// g_a(X_i): treatment probability implied by the weights.
inline double conditional_treatment_prob(const WorkingDensity& d, int a, std::size_t i) {
  const double mass = d.group_mass(i);
  if (!(mass > 0.0)) throw NumericalError("degenerate covariate group " + std::to_string(i));
  return (d.weight(i, a, 0) + d.weight(i, a, 1)) / mass;
}

inline nlohmann::json to_json(const WorkingDensity& d) {
  nlohmann::json atoms = nlohmann::json::array();
  for (const auto& o : d.atoms()) atoms.push_back({{"x", o.x}, {"a", o.a}, {"y", o.y}});
  return {{"mode", to_string(d.mode())}, {"floor", d.floor()}, {"atoms", atoms}, {"weights", d.weights()}};
}

inline WorkingDensity density_from_json(const nlohmann::json& j) {
  try {
    auto atoms = std::make_shared<std::vector<Observation>>();
    for (const auto& a : j.at("atoms")) {
      Observation o{a.at("x").get<std::vector<double>>(), a.at("a").get<int>(), a.at("y").get<int>()};
      o.validate();
      atoms->push_back(std::move(o));
    }
    for (std::size_t k = 0; k < atoms->size(); ++k) {
      const auto& o = (*atoms)[k];
      if (o.a != static_cast<int>((k / 2) % 2) || o.y != static_cast<int>(k % 2) || o.x != (*atoms)[k - k % 4].x) {
        throw InputError("density atoms are not in (x_i, a, y) group order");
      }
    }
    return WorkingDensity(std::move(atoms), j.at("weights").get<std::vector<double>>(), j.at("floor").get<double>(),
                          parse_normalization_mode(j.at("mode").get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed density JSON: ") + e.what());
  }
}

}  // namespace ulfs
