#pragma once

// Stopping rules for the discretized flow. Each rule is a pure function of diagnostics computed
// from consecutive iterates. Rules that compare against a predecessor do not fire on the first
// iterate; absolute clauses still apply there.

#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ulfs/error.hpp"
#include "ulfs/kernel.hpp"
#include "ulfs/numeric.hpp"
#include "ulfs/targets.hpp"

namespace ulfs {

enum class StopRule { SC1 = 1, SC2, SC3, SC4, SC5 };

/// Tie-break order when several rules fire on the same iterate.
inline constexpr StopRule kStopPriority[] = {StopRule::SC3, StopRule::SC2, StopRule::SC1, StopRule::SC4,
                                             StopRule::SC5};

inline std::string to_string(StopRule r) { return "sc" + std::to_string(static_cast<int>(r)); }

inline StopRule parse_stop_rule(const std::string& s) {
  std::string t;
  for (char c : s) t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (t.size() == 3 && t[0] == 's' && t[1] == 'c' && t[2] >= '1' && t[2] <= '5') {
    return static_cast<StopRule>(t[2] - '0');
  }
  throw InputError("unknown stopping rule '" + s + "' (expected sc1..sc5)");
}

/// Comma-separated list, e.g. "sc1,sc3". "none" or "" gives the empty set.
inline std::set<StopRule> parse_stop_rules(const std::string& list) {
  std::set<StopRule> out;
  if (list.empty() || list == "none") return out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.insert(parse_stop_rule(item));
  }
  return out;
}

inline std::string to_string(const std::set<StopRule>& rules) {
  if (rules.empty()) return "none";
  std::string s;
  for (auto r : rules) s += (s.empty() ? "" : ",") + to_string(r);
  return s;
}

struct StoppingConfig {
  double delta_p = 1e-8;
  double delta_s = 1e-8;
  double delta_alpha = 1e-8;
  double delta_v = 1e-8;
  double delta_ell = 1e-8;
  double eif_c = 1.0;
  double cumulative_multiplier = 1.0;  ///< SC4 "cumulative variability >= multiplier / n".
  Target eif_target = Target::ATE;     ///< Parameter whose EIF SC5 monitors.
  std::set<StopRule> enabled{StopRule::SC1};

  void validate() const {
    for (double v : {delta_p, delta_s, delta_alpha, delta_v, delta_ell, eif_c, cumulative_multiplier}) {
      if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("stopping tolerances must be positive");
    }
  }
};

/// Quantities evaluated by the rules; unset when not computed on this iterate.
struct StopDiagnostics {
  std::optional<double> delta_p;         ///< P_n[(log p_t - log p_{t-1})^2]
  std::optional<double> score;           ///< s_t
  std::optional<double> direction_norm;  ///< (1/n) ||D||^2_H
  std::optional<double> delta_v;
  std::optional<double> delta_ell;       ///< |P_n[log p_t - log p_{t-1}]|
  std::optional<double> cumulative;      ///< P_n[(log p_t - log p_0)^2]
  std::optional<double> eif_mean;        ///< P_n[phi*]

  void merge(const StopDiagnostics& o) {
    auto take = [](std::optional<double>& dst, const std::optional<double>& src) {
      if (src) dst = src;
    };
    take(delta_p, o.delta_p);
    take(score, o.score);
    take(direction_norm, o.direction_norm);
    take(delta_v, o.delta_v);
    take(delta_ell, o.delta_ell);
    take(cumulative, o.cumulative);
    take(eif_mean, o.eif_mean);
  }
};

struct StopDecision {
  bool fired = false;
  std::optional<StopRule> rule;
  StopDiagnostics diagnostics;
};

namespace detail {

inline StopDecision decide(bool fired, StopRule rule, StopDiagnostics diag) {
  StopDecision d;
  d.fired = fired;
  if (fired) d.rule = rule;
  d.diagnostics = diag;
  return d;
}

inline double mean_sq_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DomainError("log-density vectors are not aligned");
  std::vector<double> t(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) t[i] = (a[i] - b[i]) * (a[i] - b[i]);
  return mean(t);
}

inline double mean_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DomainError("log-density vectors are not aligned");
  std::vector<double> t(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) t[i] = a[i] - b[i];
  return mean(t);
}

}  // namespace detail

/// SC1: the log-density at the sample has stopped moving. Empty `prev_log` means no predecessor.
inline StopDecision sc1_density_plateau(std::span<const double> curr_log, std::span<const double> prev_log,
                                        std::optional<double> prev_delta, const StoppingConfig& cfg) {
  if (prev_log.empty()) return {};
  StopDiagnostics diag;
  const double dp = detail::mean_sq_diff(curr_log, prev_log);
  diag.delta_p = dp;
  const bool fired = dp <= cfg.delta_p || (prev_delta && std::abs(dp - *prev_delta) <= 0.1 * cfg.delta_p);
  return detail::decide(fired, StopRule::SC1, diag);
}

/// SC2: the Lyapunov score s_t is small or has plateaued.
inline StopDecision sc2_score_plateau(double s_t, std::optional<double> s_prev, const StoppingConfig& cfg) {
  StopDiagnostics diag;
  diag.score = s_t;
  const bool fired = std::abs(s_t) <= cfg.delta_s || (s_prev && std::abs(s_t - *s_prev) <= 0.1 * cfg.delta_s);
  return detail::decide(fired, StopRule::SC2, diag);
}

/// (1/n^2) alpha^T G alpha, the squared RKHS norm of D = (1/n) sum_j alpha_j k_{O_j}.
inline double direction_rkhs_norm_sq(std::span<const double> gram, std::span<const double> alpha) {
  const std::size_t n = alpha.size();
  if (gram.size() != n * n) throw DomainError("Gram matrix and coefficient vector do not match");
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double row = 0.0;
    for (std::size_t l = 0; l < n; ++l) row += gram[j * n + l] * alpha[l];
    s += alpha[j] * row;
  }
  return s / static_cast<double>(n * n);
}

/// SC3 from a precomputed centered Gram matrix.
inline StopDecision sc3_from_gram(std::span<const double> gram, std::span<const double> alpha,
                                  const StoppingConfig& cfg) {
  StopDiagnostics diag;
  const double v = direction_rkhs_norm_sq(gram, alpha) / static_cast<double>(alpha.size());
  diag.direction_norm = v;
  return detail::decide(v <= cfg.delta_alpha, StopRule::SC3, diag);
}

/// SC3: the RKHS update direction is nearly zero.
inline StopDecision sc3_vanishing_direction(const CenteredKernel& ck, std::span<const double> alpha,
                                            const Sample& sample, const StoppingConfig& cfg) {
  const std::size_t n = sample.size();
  if (alpha.size() != n) throw DomainError("alpha length does not match sample size");
  std::vector<double> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = ck.mean_embedding_at(sample[i]);
  std::vector<double> g(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      g[i * n + j] = gauss_kernel(sample[i], sample[j], ck.config()) - m[i] * m[j] / ck.kappa();
    }
  }
  return sc3_from_gram(g, alpha, cfg);
}

/// SC4: variability accumulates without average improvement.
inline StopDecision sc4_variance_dominated(std::span<const double> curr_log, std::span<const double> prev_log,
                                           std::span<const double> initial_log, std::size_t n,
                                           const StoppingConfig& cfg) {
  if (prev_log.empty()) return {};
  StopDiagnostics diag;
  const double dv = detail::mean_sq_diff(curr_log, prev_log);
  const double dl = std::abs(detail::mean_diff(curr_log, prev_log));
  const double cum = detail::mean_sq_diff(curr_log, initial_log);
  diag.delta_v = dv;
  diag.delta_ell = dl;
  diag.cumulative = cum;
  const bool fired =
      dv <= cfg.delta_v || (cum >= cfg.cumulative_multiplier / static_cast<double>(n) && dl <= cfg.delta_ell);
  return detail::decide(fired, StopRule::SC4, diag);
}

/// SC5: the EIF estimating equation is solved to first order and no longer improving.
/// Empty `eif_prev` means no predecessor (or EIF unavailable): never fires.
inline StopDecision sc5_eif_solved(std::span<const double> eif_curr, std::span<const double> eif_prev, std::size_t n,
                                   const StoppingConfig& cfg) {
  if (eif_curr.empty()) return {};
  StopDiagnostics diag;
  const double cur = mean(eif_curr);
  diag.eif_mean = cur;
  if (eif_prev.empty()) return detail::decide(false, StopRule::SC5, diag);
  const double prev = mean(eif_prev);
  const bool fired =
      std::abs(cur) <= cfg.eif_c / std::sqrt(static_cast<double>(n)) && std::abs(cur) >= std::abs(prev);
  return detail::decide(fired, StopRule::SC5, diag);
}

}  // namespace ulfs
