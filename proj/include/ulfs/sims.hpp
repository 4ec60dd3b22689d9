#pragma once

// Data-generating processes, quadrature truths, and the Monte Carlo harness.

#include <nlohmann/json.hpp>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "ulfs/baselines.hpp"
#include "ulfs/density.hpp"
#include "ulfs/error.hpp"
#include "ulfs/flow.hpp"
#include "ulfs/kernel.hpp"
#include "ulfs/numeric.hpp"
#include "ulfs/nuisance.hpp"
#include "ulfs/targets.hpp"

namespace ulfs {

/// A one-covariate observational DGP with binary treatment and outcome.
struct Dgp {
  std::string id;
  double x_lo = 0.0;
  double x_hi = 1.0;
  std::function<double(double)> x_density;
  std::function<double(Rng&)> draw_x;
  std::function<double(double)> propensity;         ///< P(A = 1 | x)
  std::function<double(int, double)> outcome_mean;  ///< P(Y = 1 | a, x)
};

/// X ~ U(0,1), A|X ~ Bern(0.5 + sin(50X/pi)/3), Y|A,X ~ Bern(0.4 + A(X - 0.3)^2 + sin(40X/pi)/4).
inline Dgp dgp1() {
  return {"DGP1",
          0.0,
          1.0,
          [](double x) { return (x >= 0.0 && x <= 1.0) ? 1.0 : 0.0; },
          [](Rng& r) { return r.uniform(); },
          [](double x) { return 0.5 + std::sin(50.0 * x / M_PI) / 3.0; },
          [](int a, double x) { return 0.4 + a * (x - 0.3) * (x - 0.3) + 0.25 * std::sin(40.0 * x / M_PI); }};
}

/// X ~ 0.9 U(-1,1) + 0.1 U(-2,2), A|X ~ Bern(expit(4X)), Y|A,X ~ Bern(expit(-0.5 + A + 0.5X)).
inline Dgp dgp2() {
  return {"DGP2",
          -2.0,
          2.0,
          [](double x) {
            const double ax = std::abs(x);
            return (ax <= 1.0 ? 0.9 * 0.5 : 0.0) + (ax <= 2.0 ? 0.1 * 0.25 : 0.0);
          },
          [](Rng& r) {
            const double u = r.uniform();
            return u < 0.9 ? r.uniform(-1.0, 1.0) : r.uniform(-2.0, 2.0);
          },
          [](double x) { return expit(4.0 * x); },
          [](int a, double x) { return expit(-0.5 + a + 0.5 * x); }};
}

/// Null-effect DGP: X ~ U(0,1), A ~ Bern(0.5), Y ~ Bern(0.7) independent of (A, X).
inline Dgp null_dgp() {
  return {"NULL",
          0.0,
          1.0,
          [](double x) { return (x >= 0.0 && x <= 1.0) ? 1.0 : 0.0; },
          [](Rng& r) { return r.uniform(); },
          [](double) { return 0.5; },
          [](int, double) { return 0.7; }};
}

inline Dgp dgp_by_id(const std::string& id) {
  std::string up;
  for (char c : id) up += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (up == "DGP1") return dgp1();
  if (up == "DGP2") return dgp2();
  if (up == "NULL") return null_dgp();
  throw InputError("unknown DGP '" + id + "' (expected DGP1, DGP2 or NULL)");
}

inline constexpr std::size_t kOracleNodes = 1'000'000;

/// mu_a by composite-midpoint quadrature over the X support, then the three contrasts.
inline TargetEstimates true_value_oracle(const Dgp& dgp, std::size_t nodes = kOracleNodes) {
  const double h = (dgp.x_hi - dgp.x_lo) / static_cast<double>(nodes);
  std::vector<double> v0(nodes), v1(nodes);
  for (std::size_t k = 0; k < nodes; ++k) {
    const double x = dgp.x_lo + (static_cast<double>(k) + 0.5) * h;
    const double f = dgp.x_density(x) * h;
    v0[k] = f * dgp.outcome_mean(0, x);
    v1[k] = f * dgp.outcome_mean(1, x);
  }
  return make_targets(pairwise_sum(v0), pairwise_sum(v1));
}

/// Oracle truth, computed once per process per DGP id.
inline TargetEstimates cached_truth(const Dgp& dgp) {
  static std::mutex mu;
  static std::map<std::string, TargetEstimates> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(dgp.id);
  if (it == cache.end()) it = cache.emplace(dgp.id, true_value_oracle(dgp)).first;
  return it->second;
}

struct DgpDraw {
  Sample sample;
  TargetEstimates truth;
};

/// n draws from the DGP; every Bernoulli mean is checked to lie strictly inside (0, 1).
inline DgpDraw sample_dgp(const Dgp& dgp, std::size_t n, std::uint64_t seed) {
  if (n < 10) throw DomainError("DGP samples need n >= 10");
  Rng rng(seed);
  Sample s;
  s.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = dgp.draw_x(rng);
    const double e = dgp.propensity(x);
    if (!(e > 0.0 && e < 1.0)) throw DomainError("DGP validity: propensity outside (0,1)");
    const int a = rng.bernoulli(e);
    const double q = dgp.outcome_mean(a, x);
    if (!(q > 0.0 && q < 1.0)) throw DomainError("DGP validity: outcome mean outside (0,1)");
    const int y = rng.bernoulli(q);
    s.push_back(Observation{{x}, a, y});
  }
  return {std::move(s), cached_truth(dgp)};
}

inline DgpDraw sample_dgp1(std::size_t n, std::uint64_t seed) { return sample_dgp(dgp1(), n, seed); }
inline DgpDraw sample_dgp2(std::size_t n, std::uint64_t seed) { return sample_dgp(dgp2(), n, seed); }

inline nlohmann::json to_json(const TargetEstimates& t) {
  return {{"mu0", t.mu0}, {"mu1", t.mu1}, {"ate", t.ate}, {"rr", t.rr}, {"or", t.or_}};
}

inline TargetEstimates targets_from_json(const nlohmann::json& j) {
  TargetEstimates t;
  t.mu0 = j.at("mu0").get<double>();
  t.mu1 = j.at("mu1").get<double>();
  t.ate = j.at("ate").get<double>();
  t.rr = j.at("rr").get<double>();
  t.or_ = j.at("or").get<double>();
  return t;
}

/// Golden truth file: {"quadrature_nodes": N, "<DGP id>": {mu0, mu1, ate, rr, or}, ...}.
inline nlohmann::json make_truths_golden(std::size_t nodes = kOracleNodes) {
  nlohmann::json j{{"quadrature_nodes", nodes}, {"rule", "composite midpoint"}};
  for (const auto& dgp : {dgp1(), dgp2(), null_dgp()}) j[dgp.id] = to_json(true_value_oracle(dgp, nodes));
  return j;
}

/// Reads the truth for `dgp` from the golden file, regenerating the file if it is missing or
/// lacks the entry.
inline TargetEstimates load_or_create_truth(const std::string& path, const Dgp& dgp) {
  {
    std::ifstream in(path);
    if (in) {
      try {
        const auto j = nlohmann::json::parse(in);
        if (j.contains(dgp.id)) return targets_from_json(j.at(dgp.id));
      } catch (const nlohmann::json::exception&) {
      }
    }
  }
  const auto j = make_truths_golden();
  std::ofstream out(path);
  if (!out) throw InputError("cannot write truth file '" + path + "'");
  out << j.dump(2) << "\n";
  return targets_from_json(j.at(dgp.id));
}

// --------------------------------------------------------------------------------------------
// Monte Carlo harness

/// One stopping-rule configuration of the flow estimator. Each variant is a separate flow run.
struct UlfsVariant {
  std::set<StopRule> rules;
  std::string label() const { return to_string(rules); }
};

struct MonteCarloConfig {
  std::string dgp = "DGP1";
  std::size_t n = 300;
  std::size_t reps = 200;
  std::uint64_t seed = 20240601;
  unsigned jobs = 1;
  FlowConfig flow;                      ///< Stopping set is overridden per variant.
  std::optional<double> sigma;          ///< Unset: median heuristic per replicate.
  double binary_scale = 1.0;
  double floor = 1e-3;
  NuisanceConfig nuisance;
  std::vector<UlfsVariant> variants{{{StopRule::SC1}}};
  bool baselines = true;

  MonteCarloConfig() {
    flow.mode = NormalizationMode::XMarginalFixed;
    flow.use_score_target = false;
  }
};

struct ReplicateEstimate {
  std::string method;
  std::string stopping_rule;  ///< Variant label for the flow estimator, "-" otherwise.
  Target target;
  double value;
  bool converged;
};

struct FlowOutcome {
  std::string stopping_rule;
  int iterations = 0;
  std::string stop_reason;
  bool converged = false;
  double score_initial = 0.0;
  double score_final = 0.0;
  double eif_ate_initial = 0.0;  ///< P_n[EIF_ATE] at iterate 0.
  double eif_ate_final = 0.0;    ///< P_n[EIF_ATE] at the stopped iterate.
};

struct ReplicateResult {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double sigma = 0.0;
  int flow_runs = 0;
  std::vector<FlowOutcome> flows;
  std::vector<ReplicateEstimate> estimates;
};

struct SimulationSummary {
  std::string dgp;
  std::string method;
  std::string parameter;
  std::string stopping_rule;
  int n_converged = 0;
  int n_used = 0;
  double truth = 0.0;
  double bias_x100 = 0.0;
  double var = 0.0;
  double rmse = 0.0;
  std::vector<double> replicates;
};

struct MonteCarloResult {
  MonteCarloConfig config;
  TargetEstimates truth;
  std::vector<ReplicateResult> replicates;
  std::vector<SimulationSummary> summaries;
};

/// Everything for one replicate: sample, nuisance fit, flow variants, baselines.
inline ReplicateResult run_replicate(const MonteCarloConfig& cfg, const Dgp& dgp, std::size_t index) {
  ReplicateResult r;
  r.index = index;
  r.seed = derive_seed(cfg.seed, index);
  try {
    const auto draw = sample_dgp(dgp, cfg.n, derive_seed(r.seed, 0));
    const auto fit = fit_nuisance(draw.sample, cfg.nuisance, derive_seed(r.seed, 1));
    const auto d0 = init_from_nuisance(covariates_of(draw.sample), fit, cfg.floor, cfg.flow.mode);
    KernelConfig kc;
    kc.binary_scale = cfg.binary_scale;
    kc.sigma = cfg.sigma ? *cfg.sigma : median_heuristic_sigma(draw.sample, cfg.binary_scale);
    r.sigma = kc.sigma;
    const auto problem = make_flow_problem(d0, draw.sample, kc);

    for (const auto& variant : cfg.variants) {
      FlowConfig fc = cfg.flow;
      fc.stopping.enabled = variant.rules;
      const FlowTrace trace = run_flow(problem, d0, fc);
      ++r.flow_runs;
      const auto est = estimate_targets(trace.final_density);
      FlowOutcome fo;
      fo.stopping_rule = variant.label();
      fo.iterations = trace.iterations;
      fo.stop_reason = to_string(trace.reason);
      fo.converged = trace.converged;
      fo.score_initial = trace.records.front().score;
      fo.score_final = trace.records.back().score;
      fo.eif_ate_initial = trace.records.front().eif_ate_mean;
      fo.eif_ate_final = trace.records.back().eif_ate_mean;
      r.flows.push_back(fo);
      for (auto t : kAllTargets) r.estimates.push_back({"ulfs_kdpe", fo.stopping_rule, t, est.get(t), trace.converged});
    }

    if (cfg.baselines) {
      const auto init = initial_plugin(d0);
      for (auto t : kAllTargets) r.estimates.push_back({"initial", "-", t, init.estimates.get(t), true});
      for (auto t : kAllTargets) {
        const auto os = one_step(d0, draw.sample, t);
        r.estimates.push_back({"one_step", "-", t, os.estimates.get(t), true});
      }
      const auto tm = tmle_ate(d0, draw.sample);
      r.estimates.push_back({"tmle", "-", Target::ATE, tm.estimates.ate, tm.converged});
    }
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
    r.estimates.clear();
  }
  return r;
}

/// bias, var = (1/B) sum (x - xbar)^2, rmse = sqrt((1/B) sum (x - truth)^2).
inline void fill_moments(SimulationSummary& s) {
  const auto& v = s.replicates;
  s.n_used = static_cast<int>(v.size());
  if (v.empty()) {
    s.bias_x100 = s.var = s.rmse = std::numeric_limits<double>::quiet_NaN();
    return;
  }
  const double xbar = mean(v);
  std::vector<double> dev(v.size()), err(v.size());
  for (std::size_t b = 0; b < v.size(); ++b) {
    dev[b] = (v[b] - xbar) * (v[b] - xbar);
    err[b] = (v[b] - s.truth) * (v[b] - s.truth);
  }
  s.bias_x100 = 100.0 * (xbar - s.truth);
  s.var = mean(dev);
  s.rmse = std::sqrt(mean(err));
}

/// Aggregates replicate estimates into one summary per (method, stopping rule, parameter).
/// Failed replicates are excluded from the moments.
inline std::vector<SimulationSummary> summarize(const std::string& dgp_id, const TargetEstimates& truth,
                                                const std::vector<ReplicateResult>& reps) {
  std::vector<SimulationSummary> out;
  auto find = [&](const ReplicateEstimate& e) -> SimulationSummary& {
    for (auto& s : out) {
      if (s.method == e.method && s.stopping_rule == e.stopping_rule && s.parameter == to_string(e.target)) return s;
    }
    SimulationSummary s;
    s.dgp = dgp_id;
    s.method = e.method;
    s.stopping_rule = e.stopping_rule;
    s.parameter = to_string(e.target);
    s.truth = truth.get(e.target);
    out.push_back(std::move(s));
    return out.back();
  };
  for (const auto& r : reps) {
    if (!r.ok) continue;
    for (const auto& e : r.estimates) {
      auto& s = find(e);
      if (e.converged) ++s.n_converged;
      if (std::isfinite(e.value)) s.replicates.push_back(e.value);
    }
  }
  for (auto& s : out) fill_moments(s);
  return out;
}

/// Runs all replicates (concurrently when jobs > 1) and aggregates them in replicate order.
inline MonteCarloResult run_monte_carlo(const MonteCarloConfig& cfg) {
  if (cfg.reps < 1) throw DomainError("need at least one replicate");
  const Dgp dgp = dgp_by_id(cfg.dgp);
  if (dgp.id != "DGP1" && dgp.id != "DGP2") throw InputError("simulation DGP must be DGP1 or DGP2");
  cfg.flow.validate();
  MonteCarloResult res;
  res.config = cfg;
  res.truth = cached_truth(dgp);
  res.replicates.resize(cfg.reps);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t b = next++; b < cfg.reps; b = next++) res.replicates[b] = run_replicate(cfg, dgp, b);
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(cfg.jobs, static_cast<unsigned>(cfg.reps)));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < jobs; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  res.summaries = summarize(dgp.id, res.truth, res.replicates);
  return res;
}

inline std::string format_number(double v) {
  if (!std::isfinite(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline constexpr const char* kSummaryCsvHeader = "dgp,method,parameter,stopping_rule,n_cov,bias_x100,var,rmse";

inline void write_summary_csv(std::ostream& os, const std::vector<SimulationSummary>& summaries) {
  os << kSummaryCsvHeader << "\n";
  for (const auto& s : summaries) {
    os << s.dgp << "," << s.method << "," << s.parameter << "," << s.stopping_rule << "," << s.n_converged << ","
       << format_number(s.bias_x100) << "," << format_number(s.var) << "," << format_number(s.rmse) << "\n";
  }
}

/// One row per replicate estimate, with sqrt(n)-scaled error for histograms.
inline void write_histogram_csv(std::ostream& os, const MonteCarloResult& res) {
  os << "dgp,method,parameter,stopping_rule,replicate,estimate,scaled_error\n";
  const double rn = std::sqrt(static_cast<double>(res.config.n));
  for (const auto& r : res.replicates) {
    if (!r.ok) continue;
    for (const auto& e : r.estimates) {
      os << res.config.dgp << "," << e.method << "," << to_string(e.target) << "," << e.stopping_rule << ","
         << r.index << "," << format_number(e.value) << ","
         << format_number(rn * (e.value - res.truth.get(e.target))) << "\n";
    }
  }
}

inline nlohmann::json to_json(const MonteCarloResult& res) {
  nlohmann::json summaries = nlohmann::json::array();
  for (const auto& s : res.summaries) {
    summaries.push_back({{"dgp", s.dgp},
                         {"method", s.method},
                         {"parameter", s.parameter},
                         {"stopping_rule", s.stopping_rule},
                         {"n_cov", s.n_converged},
                         {"n_used", s.n_used},
                         {"truth", s.truth},
                         {"bias_x100", s.bias_x100},
                         {"var", s.var},
                         {"rmse", s.rmse},
                         {"replicates", s.replicates}});
  }
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : res.replicates) {
    nlohmann::json flows = nlohmann::json::array();
    for (const auto& f : r.flows) {
      flows.push_back({{"stopping_rule", f.stopping_rule},
                       {"iterations", f.iterations},
                       {"stop_reason", f.stop_reason},
                       {"converged", f.converged},
                       {"score_initial", f.score_initial},
                       {"score_final", f.score_final},
                       {"eif_ate_initial", f.eif_ate_initial},
                       {"eif_ate_final", f.eif_ate_final}});
    }
    reps.push_back({{"index", r.index},
                    {"seed", r.seed},
                    {"ok", r.ok},
                    {"error", r.error},
                    {"sigma", r.sigma},
                    {"flow_runs", r.flow_runs},
                    {"flows", flows}});
  }
  const auto& c = res.config;
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : c.variants) variants.push_back(v.label());
  return {{"config",
           {{"dgp", c.dgp},
            {"n", c.n},
            {"reps", c.reps},
            {"seed", c.seed},
            {"delta", c.flow.delta},
            {"max_iters", c.flow.max_iters},
            {"delta_n", c.flow.delta_n},
            {"norm_mode", to_string(c.flow.mode)},
            {"sigma", c.sigma ? nlohmann::json(*c.sigma) : nlohmann::json("median")},
            {"floor", c.floor},
            {"variants", variants}}},
          {"truth", to_json(res.truth)},
          {"summaries", summaries},
          {"replicates", reps}};
}

}  // namespace ulfs
