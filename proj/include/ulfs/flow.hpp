#pragma once

// Discretized kernel-restricted density flow. Each iteration centers the Gaussian kernel at the
// current working distribution, forms the centered Gram matrix G at the sample, takes
// alpha = G 1 / n and the direction D = (1/n) sum_j alpha_j K^(t)(., O_j), then applies the
// exponential tilt p <- p exp(delta D) and renormalizes.

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ulfs/density.hpp"
#include "ulfs/error.hpp"
#include "ulfs/kernel.hpp"
#include "ulfs/numeric.hpp"
#include "ulfs/stopping.hpp"
#include "ulfs/targets.hpp"

namespace ulfs {

struct FlowConfig {
  double delta = 0.01;
  int max_iters = 100;
  double delta_n = 1e-6;         ///< Score target: stop once s_t <= delta_n.
  bool use_score_target = true;
  StoppingConfig stopping;
  NormalizationMode mode = NormalizationMode::Global;
  bool assert_invariants = false;  ///< Throw InvariantViolation as soon as a checked property fails.
  double direction_sign = 1.0;     ///< Test hook: -1 tilts against the flow.

  void validate() const {
    // delta = 0 is accepted as the degenerate no-op flow.
    if (!(delta >= 0.0) || !std::isfinite(delta)) throw DomainError("step size must be nonnegative");
    if (max_iters < 1) throw DomainError("max_iters must be at least 1");
    if (!(delta_n > 0.0)) throw DomainError("delta_n must be positive");
    stopping.validate();
  }
};

enum class StopReason { SC1, SC2, SC3, SC4, SC5, ScoreTarget, MaxIters };

inline StopReason to_stop_reason(StopRule r) { return static_cast<StopReason>(static_cast<int>(r) - 1); }

inline std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::SC1: return "sc1";
    case StopReason::SC2: return "sc2";
    case StopReason::SC3: return "sc3";
    case StopReason::SC4: return "sc4";
    case StopReason::SC5: return "sc5";
    case StopReason::ScoreTarget: return "score_target";
    case StopReason::MaxIters: return "max_iters";
  }
  return "?";
}

/// Data shared by every iterate of one flow run: the sample, where each sample point sits in the
/// atom support, and the base Gram over the support (fixed across iterations).
struct FlowProblem {
  Sample sample;
  std::vector<std::size_t> sample_atoms;
  std::shared_ptr<const std::vector<Observation>> support;
  std::shared_ptr<const BaseGram> gram;
  KernelConfig kernel;
};

inline std::shared_ptr<const FlowProblem> make_flow_problem(const WorkingDensity& d, const Sample& sample,
                                                            const KernelConfig& kernel, bool precompute_gram = true) {
  kernel.validate();
  if (sample.size() != d.n_groups()) throw DomainError("sample size does not match the density's covariate groups");
  auto p = std::make_shared<FlowProblem>();
  p->sample = sample;
  p->support = d.atoms_ptr();
  p->kernel = kernel;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    sample[i].validate();
    const auto k = WorkingDensity::atom_index(i, sample[i].a, sample[i].y);
    if (d.atoms()[k].x != sample[i].x) throw DomainError("sample point " + std::to_string(i) + " is not an atom");
    p->sample_atoms.push_back(k);
  }
  if (precompute_gram) p->gram = std::make_shared<const BaseGram>(*p->support, kernel);
  return p;
}

/// G^(t)_{ij} = K^(t)(O_i, O_j) for arbitrary sample points.
inline std::vector<double> centered_gram(const CenteredKernel& ck, const Sample& sample) {
  const std::size_t n = sample.size();
  std::vector<double> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = ck.mean_embedding_at(sample[i]);
  std::vector<double> g(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = gauss_kernel(sample[i], sample[j], ck.config()) - m[i] * m[j] / ck.kappa();
      g[i * n + j] = v;
      g[j * n + i] = v;
    }
  }
  return g;
}

/// Centered Gram for sample points given by their support indices.
inline std::vector<double> centered_gram_atoms(const CenteredKernel& ck, std::span<const std::size_t> atoms) {
  const std::size_t n = atoms.size();
  std::vector<double> g(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = ck.eval_atoms(atoms[i], atoms[j]);
      g[i * n + j] = v;
      g[j * n + i] = v;
    }
  }
  return g;
}

/// alpha = (1/n) G 1, i.e. alpha_j = m_n^(t)(O_j).
inline std::vector<double> compute_alpha(std::span<const double> gram, std::size_t n) {
  if (gram.size() != n * n) throw DomainError("Gram matrix is not n x n");
  std::vector<double> alpha(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += gram[i * n + j];
    alpha[j] = s / static_cast<double>(n);
  }
  return alpha;
}

/// D(o) = (1/n) sum_j alpha_j K^(t)(o, O_j).
inline double direction_at(const CenteredKernel& ck, std::span<const double> alpha, const Sample& sample,
                           const Observation& o) {
  if (alpha.size() != sample.size()) throw DomainError("alpha length does not match sample size");
  const double mo = ck.mean_embedding_at(o);
  double s = 0.0;
  for (std::size_t j = 0; j < sample.size(); ++j) {
    const double kc = gauss_kernel(o, sample[j], ck.config()) - mo * ck.mean_embedding_at(sample[j]) / ck.kappa();
    s += alpha[j] * kc;
  }
  return s / static_cast<double>(sample.size());
}

/// s_t = (1/n) sum_j alpha_j^2 = P_n[D].
inline double empirical_score(std::span<const double> alpha) {
  if (alpha.empty()) return 0.0;
  std::vector<double> sq(alpha.size());
  for (std::size_t j = 0; j < alpha.size(); ++j) sq[j] = alpha[j] * alpha[j];
  return mean(sq);
}

/// One iterate of the flow and everything derived from it.
struct FlowState {
  std::shared_ptr<const FlowProblem> problem;
  int iteration = 0;
  double t = 0.0;
  WorkingDensity density;
  std::shared_ptr<const CenteredKernel> ck;
  std::vector<double> gram;                ///< Centered Gram at the sample, row-major n x n.
  std::vector<double> alpha;
  double score = 0.0;
  std::vector<double> direction_at_atoms;  ///< D at every support atom.
  std::vector<double> log_density;         ///< log p_t at the sample (offset by log n).
  std::vector<double> logdensity_prev;     ///< Empty on the first iterate.
  std::vector<double> logdensity_initial;
  std::vector<double> loglik_history;      ///< P_n[log p] for every iterate so far, this one last.
  double step_mass_drift = std::numeric_limits<double>::quiet_NaN();  ///< |sum w' - 1| before renormalizing.
  std::optional<double> prev_delta_p;
  std::optional<double> prev_score;
  std::vector<double> eif_prev;
};

namespace detail {

inline void fill_derived(FlowState& s) {
  const auto& p = *s.problem;
  const std::size_t n = p.sample.size();
  s.ck = std::make_shared<const CenteredKernel>(p.kernel, p.support, s.density.weights(), p.gram);
  s.gram = centered_gram_atoms(*s.ck, p.sample_atoms);
  s.alpha = compute_alpha(s.gram, n);
  s.score = empirical_score(s.alpha);

  // D(atom k) = (1/n) sum_j alpha_j K(k, s_j) - m_k / kappa * (1/n) sum_j alpha_j m_{s_j}
  const auto& m = s.ck->m_values();
  double am = 0.0;
  for (std::size_t j = 0; j < n; ++j) am += s.alpha[j] * m[p.sample_atoms[j]];
  am /= static_cast<double>(n);
  const std::size_t N = s.density.size();
  s.direction_at_atoms.assign(N, 0.0);
  for (std::size_t k = 0; k < N; ++k) {
    double acc = 0.0;
    if (p.gram) {
      const auto row = p.gram->row(k);
      for (std::size_t j = 0; j < n; ++j) acc += s.alpha[j] * row[p.sample_atoms[j]];
    } else {
      for (std::size_t j = 0; j < n; ++j) acc += s.alpha[j] * s.ck->base(k, p.sample_atoms[j]);
    }
    s.direction_at_atoms[k] = acc / static_cast<double>(n) - m[k] / s.ck->kappa() * am;
  }
  s.log_density = log_density_at_sample(s.density, p.sample);
  s.loglik_history.push_back(mean(s.log_density));
}

}  // namespace detail

inline FlowState make_flow_state(std::shared_ptr<const FlowProblem> problem, WorkingDensity density) {
  FlowState s{std::move(problem), 0, 0.0, std::move(density)};
  detail::fill_derived(s);
  s.logdensity_initial = s.log_density;
  return s;
}

/// Exponential tilt by delta * D followed by renormalization; returns the next iterate.
inline FlowState euler_step(const FlowState& state, const FlowConfig& cfg) {
  const auto& w = state.density.weights();
  std::vector<double> next(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double z = cfg.delta * cfg.direction_sign * state.direction_at_atoms[k];
    if (!(std::abs(z) <= 700.0)) throw NumericalError("tilt exponent overflow; reduce the step size");
    next[k] = w[k] * std::exp(z);
  }
  const double drift = std::abs(pairwise_sum(next) - 1.0);
  WorkingDensity tilted = renormalize(state.density.with_weights(std::move(next)), cfg.mode);

  FlowState s{state.problem, state.iteration + 1, state.t + cfg.delta, std::move(tilted)};
  s.loglik_history = state.loglik_history;
  s.logdensity_prev = state.log_density;
  s.logdensity_initial = state.logdensity_initial;
  s.step_mass_drift = drift;
  detail::fill_derived(s);
  return s;
}

/// Per-iterate record kept in the trace.
struct IterationRecord {
  int iteration = 0;
  double t = 0.0;
  double score = 0.0;
  double loglik = 0.0;
  double mean_alpha = 0.0;
  double mn_norm_sq = 0.0;           ///< ||m_n||^2 = (1/n^2) sum_ij K^(t)(O_i, O_j), summed independently of alpha.
  double centered_direction = 0.0;   ///< sum_atoms w D
  double max_abs_direction = 0.0;
  double mass_error = 0.0;           ///< |sum w - 1|
  double group_mass_error = 0.0;     ///< max_i |group mass - 1/n|; only meaningful in xfixed mode.
  double step_mass_drift = std::numeric_limits<double>::quiet_NaN();
  double eif_ate_mean = std::numeric_limits<double>::quiet_NaN();
  StopDiagnostics diagnostics;
};

struct FlowTrace {
  std::vector<IterationRecord> records;
  WorkingDensity final_density;
  StopReason reason = StopReason::MaxIters;
  int iterations = 0;      ///< Euler steps taken.
  bool converged = false;  ///< A stopping rule (or the score target) fired before max_iters.
  double wall_seconds = 0.0;
};

namespace detail {

inline IterationRecord make_record(const FlowState& s) {
  IterationRecord r;
  const std::size_t n = s.alpha.size();
  r.iteration = s.iteration;
  r.t = s.t;
  r.score = s.score;
  r.loglik = s.loglik_history.back();
  r.mean_alpha = mean(s.alpha);
  r.mn_norm_sq = pairwise_sum(s.gram) / static_cast<double>(n * n);
  const auto& w = s.density.weights();
  std::vector<double> wd(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    wd[k] = w[k] * s.direction_at_atoms[k];
    r.max_abs_direction = std::max(r.max_abs_direction, std::abs(s.direction_at_atoms[k]));
  }
  r.centered_direction = pairwise_sum(wd);
  r.mass_error = std::abs(s.density.total_mass() - 1.0);
  if (s.density.mode() == NormalizationMode::XMarginalFixed) {
    const double target = 1.0 / static_cast<double>(s.density.n_groups());
    for (std::size_t i = 0; i < s.density.n_groups(); ++i) {
      r.group_mass_error = std::max(r.group_mass_error, std::abs(s.density.group_mass(i) - target));
    }
  }
  r.step_mass_drift = s.step_mass_drift;
  try {
    r.eif_ate_mean = mean(eif_target(s.density, s.problem->sample, Target::ATE));
  } catch (const NumericalError&) {
  }
  return r;
}

}  // namespace detail

/// Name, pass flag, and first failing iteration for each runtime-checked flow property.
struct InvariantResult {
  std::string name;
  bool passed = true;
  int first_failure = -1;
  double worst = 0.0;  ///< Largest violation margin observed (0 when passing).
};

struct InvariantTolerances {
  double lyapunov_rel = 1e-9;
  double centered_direction = 1e-8;
  double stationarity = 1e-10;
  double mass = 1e-12;
  double group_mass = 1e-10;
  double direction_bound = 1.0;
};

/// Checks one record (and its predecessor, for monotonicity). Appends failures to `out`.
inline void check_record(const IterationRecord* prev, const IterationRecord& r, const InvariantTolerances& tol,
                         std::vector<InvariantResult>& out) {
  auto upd = [&](const char* name, double margin) {
    for (auto& res : out) {
      if (res.name == name) {
        if (margin > 0.0) {
          if (res.passed) res.first_failure = r.iteration;
          res.passed = false;
          res.worst = std::max(res.worst, margin);
        }
        return;
      }
    }
  };
  if (prev) upd("lyapunov_monotonicity", (prev->loglik - tol.lyapunov_rel * (1.0 + std::abs(prev->loglik))) - r.loglik);
  upd("centered_direction", std::abs(r.centered_direction) - tol.centered_direction);
  upd("score_nonnegative", -r.score);
  upd("score_embedding_bound", r.mean_alpha * r.mean_alpha - r.score * (1.0 + 1e-12));
  upd("stationarity_identity", std::abs(r.mean_alpha - r.mn_norm_sq) - tol.stationarity);
  upd("mass_conservation", std::max(r.mass_error - tol.mass, r.group_mass_error - tol.group_mass));
  upd("direction_bound", r.max_abs_direction - tol.direction_bound * (1.0 + 1e-12));
}

inline std::vector<InvariantResult> empty_invariant_table() {
  std::vector<InvariantResult> t;
  for (const char* name : {"lyapunov_monotonicity", "centered_direction", "score_nonnegative", "score_embedding_bound",
                           "stationarity_identity", "mass_conservation", "direction_bound"}) {
    t.push_back({name});
  }
  return t;
}

inline std::vector<InvariantResult> check_flow_invariants(const FlowTrace& trace, const InvariantTolerances& tol = {}) {
  auto table = empty_invariant_table();
  for (std::size_t k = 0; k < trace.records.size(); ++k) {
    check_record(k ? &trace.records[k - 1] : nullptr, trace.records[k], tol, table);
  }
  return table;
}

/// Evaluates the enabled stopping rules (and the score target) at an iterate.
inline std::optional<StopReason> evaluate_stopping(const FlowState& s, const FlowConfig& cfg, StopDiagnostics& diag,
                                                   std::vector<double>& eif_curr) {
  const auto& sc = cfg.stopping;
  const std::size_t n = s.alpha.size();
  std::optional<StopReason> reason;
  if (cfg.use_score_target && s.score <= cfg.delta_n) reason = StopReason::ScoreTarget;

  std::set<StopRule> fired_rules;
  auto consider = [&](StopRule rule, const StopDecision& d) {
    diag.merge(d.diagnostics);
    if (d.fired && sc.enabled.count(rule)) fired_rules.insert(rule);
  };
  consider(StopRule::SC1, sc1_density_plateau(s.log_density, s.logdensity_prev, s.prev_delta_p, sc));
  consider(StopRule::SC2, sc2_score_plateau(s.score, s.prev_score, sc));
  consider(StopRule::SC3, sc3_from_gram(s.gram, s.alpha, sc));
  consider(StopRule::SC4, sc4_variance_dominated(s.log_density, s.logdensity_prev, s.logdensity_initial, n, sc));
  if (sc.enabled.count(StopRule::SC5)) {
    try {
      eif_curr = eif_target(s.density, s.problem->sample, sc.eif_target);
    } catch (const NumericalError&) {
      eif_curr.clear();
    }
    consider(StopRule::SC5, sc5_eif_solved(eif_curr, s.eif_prev, n, sc));
  }
  if (!reason) {
    for (auto r : kStopPriority) {
      if (fired_rules.count(r)) {
        reason = to_stop_reason(r);
        break;
      }
    }
  }
  return reason;
}

/// Runs the flow from `initial` until a stopping rule fires or max_iters steps have been taken.
inline FlowTrace run_flow(std::shared_ptr<const FlowProblem> problem, const WorkingDensity& initial,
                          const FlowConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  FlowTrace trace{{}, initial};
  auto table = empty_invariant_table();
  FlowState state = make_flow_state(std::move(problem), initial);
  for (int m = 0;; ++m) {
    IterationRecord rec = detail::make_record(state);
    std::vector<double> eif_curr;
    std::optional<StopReason> reason;
    if (m < cfg.max_iters) reason = evaluate_stopping(state, cfg, rec.diagnostics, eif_curr);
    trace.records.push_back(rec);
    if (cfg.assert_invariants) {
      check_record(m ? &trace.records[static_cast<std::size_t>(m) - 1] : nullptr, rec, {}, table);
      for (const auto& res : table) {
        if (!res.passed) {
          throw InvariantViolation(res.name, res.first_failure,
                                   "flow invariant '" + res.name + "' violated at iteration " +
                                       std::to_string(res.first_failure));
        }
      }
    }
    if (reason) {
      trace.reason = *reason;
      trace.converged = true;
      break;
    }
    if (m == cfg.max_iters) {
      trace.reason = StopReason::MaxIters;
      break;
    }
    FlowState next = euler_step(state, cfg);
    next.prev_delta_p = rec.diagnostics.delta_p;
    next.prev_score = state.score;
    next.eif_prev = std::move(eif_curr);
    state = std::move(next);
  }
  trace.iterations = state.iteration;
  trace.final_density = state.density;
  trace.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return trace;
}

inline FlowTrace run_flow(const WorkingDensity& initial, const Sample& sample, const KernelConfig& kernel,
                          const FlowConfig& cfg) {
  return run_flow(make_flow_problem(initial, sample, kernel), initial, cfg);
}

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json finite_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

}  // namespace detail

inline nlohmann::json to_json(const StopDiagnostics& d) {
  using detail::opt_json;
  return {{"delta_p", opt_json(d.delta_p)},     {"s_t", opt_json(d.score)},
          {"direction_norm", opt_json(d.direction_norm)}, {"delta_v", opt_json(d.delta_v)},
          {"delta_ell", opt_json(d.delta_ell)}, {"cumulative", opt_json(d.cumulative)},
          {"eif_mean", opt_json(d.eif_mean)}};
}

/// Trace summary. `include_timing` = false drops wall time so reports can be compared byte-for-byte.
inline nlohmann::json to_json(const FlowTrace& trace, bool include_timing = true) {
  nlohmann::json iters = nlohmann::json::array();
  for (const auto& r : trace.records) {
    iters.push_back({{"iteration", r.iteration},
                     {"t", r.t},
                     {"s_t", r.score},
                     {"loglik", r.loglik},
                     {"mean_alpha", r.mean_alpha},
                     {"step_mass_drift", detail::finite_json(r.step_mass_drift)},
                     {"eif_ate_mean", detail::finite_json(r.eif_ate_mean)},
                     {"sc_diagnostics", to_json(r.diagnostics)}});
  }
  nlohmann::json j{{"stop_reason", to_string(trace.reason)},
                   {"iterations", trace.iterations},
                   {"converged", trace.converged},
                   {"trace", iters}};
  if (include_timing) j["wall_seconds"] = trace.wall_seconds;
  return j;
}

}  // namespace ulfs
