// ulfs_kdpe: estimate, simulate, diagnose, truths.
//
// Settings are layered: built-in defaults, then the JSON config (--config or ULFS_KDPE_CONFIG),
// then flags given on the command line.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "ulfs/csv_io.hpp"
#include "ulfs/density.hpp"
#include "ulfs/error.hpp"
#include "ulfs/flow.hpp"
#include "ulfs/kernel.hpp"
#include "ulfs/nuisance.hpp"
#include "ulfs/sims.hpp"
#include "ulfs/stopping.hpp"

#ifndef ULFS_KDPE_TRUTHS_DEFAULT
#define ULFS_KDPE_TRUTHS_DEFAULT "truths.json"
#endif

namespace {

using nlohmann::json;
using ulfs::InputError;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitInvariant = 4;

const std::set<std::string> kKeys{"input", "output",     "sigma", "delta", "max_iters", "delta_n",
                                  "stopping", "norm_mode", "dgp", "n", "reps", "seed",
                                  "jobs", "floor", "binary_scale", "truths_file"};

std::string normalize_key(std::string k) {
  for (auto& c : k) {
    if (c == '-') c = '_';
  }
  return k;
}

/// Merged settings: config values (JSON typed) overlaid by flag values (strings).
class Settings {
 public:
  void load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config file '" + path + "'");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw InputError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw InputError("config file '" + path + "' must hold a JSON object");
    for (auto& [k, v] : j.items()) {
      const auto key = normalize_key(k);
      if (!kKeys.count(key)) throw InputError("config file: unknown key '" + k + "'");
      values_[key] = v;
    }
  }

  void set_flag(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string str(const std::string& key, const std::string& def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    if (it->second.is_string()) return it->second.get<std::string>();
    if (it->second.is_number()) return it->second.dump();
    throw InputError("--" + flag(key) + ": expected a string");
  }

  double real(const std::string& key, double def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    if (it->second.is_number()) return it->second.get<double>();
    const auto s = str(key, "");
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
      throw InputError("--" + flag(key) + ": '" + s + "' is not a number");
    }
    return v;
  }

  std::uint64_t integer(const std::string& key, std::uint64_t def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    if (it->second.is_number_unsigned()) return it->second.get<std::uint64_t>();
    const auto s = it->second.is_string() ? it->second.get<std::string>() : it->second.dump();
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
      throw InputError("--" + flag(key) + ": '" + s + "' is not a nonnegative integer");
    }
    return v;
  }

  static std::string flag(std::string key) {
    for (auto& c : key) {
      if (c == '_') c = '-';
    }
    return key;
  }

 private:
  std::map<std::string, json> values_;
};

double positive(const Settings& s, const std::string& key, double def) {
  const double v = s.real(key, def);
  if (!(v > 0.0) || !std::isfinite(v)) throw InputError("--" + Settings::flag(key) + " must be positive");
  return v;
}

std::uint64_t at_least(const Settings& s, const std::string& key, std::uint64_t def, std::uint64_t lo) {
  const auto v = s.integer(key, def);
  if (v < lo) throw InputError("--" + Settings::flag(key) + " must be at least " + std::to_string(lo));
  return v;
}

std::optional<double> sigma_option(const Settings& s) {
  const auto v = s.str("sigma", "median");
  if (v == "median") return std::nullopt;
  return positive(s, "sigma", 1.0);
}

std::set<ulfs::StopRule> stop_rules(const Settings& s, const std::string& def) {
  return ulfs::parse_stop_rules(s.str("stopping", def));
}

ulfs::FlowConfig flow_config(const Settings& s, const std::string& default_mode, const std::string& default_rules,
                             bool score_target_by_default) {
  ulfs::FlowConfig fc;
  fc.delta = s.real("delta", fc.delta);
  if (!(fc.delta >= 0.0) || !std::isfinite(fc.delta)) throw InputError("--delta must be nonnegative");
  fc.max_iters = static_cast<int>(at_least(s, "max_iters", static_cast<std::uint64_t>(fc.max_iters), 1));
  fc.delta_n = positive(s, "delta_n", fc.delta_n);
  fc.use_score_target = score_target_by_default || s.has("delta_n");
  fc.stopping.enabled = stop_rules(s, default_rules);
  fc.mode = ulfs::parse_normalization_mode(s.str("norm_mode", default_mode));
  return fc;
}

ulfs::Sample load_sample(const Settings& s) {
  if (!s.has("input")) throw InputError("--input is required");
  return ulfs::read_sample_csv(s.str("input", ""));
}

/// Writes to --output when given, otherwise to stdout.
void emit(const Settings& s, const std::string& text) {
  if (!s.has("output")) {
    std::cout << text;
    return;
  }
  const auto path = s.str("output", "");
  std::ofstream out(path);
  if (!out) throw InputError("cannot write output file '" + path + "'");
  out << text;
}

struct Prepared {
  ulfs::WorkingDensity initial;
  ulfs::KernelConfig kernel;
  ulfs::NuisanceFit nuisance;
};

Prepared prepare(const ulfs::Sample& sample, const Settings& s, ulfs::NormalizationMode mode) {
  const double floor = positive(s, "floor", 1e-3);
  const double scale = positive(s, "binary_scale", 1.0);
  const auto seed = s.integer("seed", 20240601);
  auto fit = ulfs::fit_nuisance(sample, ulfs::NuisanceConfig{}, seed);
  auto d0 = ulfs::init_from_nuisance(ulfs::covariates_of(sample), fit, floor, mode);
  ulfs::KernelConfig kc;
  kc.binary_scale = scale;
  const auto sigma = sigma_option(s);
  kc.sigma = sigma ? *sigma : ulfs::median_heuristic_sigma(sample, scale);
  return {std::move(d0), kc, std::move(fit)};
}

int cmd_estimate(const Settings& s, bool negate) {
  const auto sample = load_sample(s);
  auto fc = flow_config(s, "global", "sc1", true);
  if (negate) fc.direction_sign = -1.0;
  const auto prep = prepare(sample, s, fc.mode);
  const auto trace = ulfs::run_flow(prep.initial, sample, prep.kernel, fc);
  json report{{"n", sample.size()},
              {"d", sample.front().x.size()},
              {"sigma", prep.kernel.sigma},
              {"binary_scale", prep.kernel.binary_scale},
              {"norm_mode", ulfs::to_string(fc.mode)},
              {"stopping", ulfs::to_string(fc.stopping.enabled)},
              {"nuisance", {{"propensity", prep.nuisance.propensity.learner_id},
                            {"outcome", prep.nuisance.outcome.learner_id}}},
              {"initial_targets", ulfs::to_json(ulfs::estimate_targets(prep.initial))},
              {"targets", ulfs::to_json(ulfs::estimate_targets(trace.final_density))},
              {"stop_reason", ulfs::to_string(trace.reason)},
              {"iterations", trace.iterations},
              {"converged", trace.converged},
              {"flow", ulfs::to_json(trace)},
              {"final_density", ulfs::to_json(trace.final_density)}};
  emit(s, report.dump(2) + "\n");
  return kExitOk;
}

int cmd_simulate(const Settings& s) {
  ulfs::MonteCarloConfig mc;
  mc.dgp = s.str("dgp", mc.dgp);
  const auto dgp = ulfs::dgp_by_id(mc.dgp);
  if (dgp.id != "DGP1" && dgp.id != "DGP2") throw InputError("--dgp must be DGP1 or DGP2 for simulate");
  mc.dgp = dgp.id;
  mc.n = at_least(s, "n", mc.n, 10);
  mc.reps = at_least(s, "reps", mc.reps, 1);
  mc.seed = s.integer("seed", mc.seed);
  mc.jobs = static_cast<unsigned>(at_least(s, "jobs", mc.jobs, 1));
  mc.flow = flow_config(s, "xfixed", "sc1", false);
  mc.sigma = sigma_option(s);
  mc.binary_scale = positive(s, "binary_scale", mc.binary_scale);
  mc.floor = positive(s, "floor", mc.floor);
  // "sc1/sc2,sc3" runs two flow variants per replicate: {sc1} and {sc2, sc3}.
  mc.variants.clear();
  std::stringstream ss(s.str("stopping", "sc1"));
  std::string item;
  while (std::getline(ss, item, '/')) mc.variants.push_back({ulfs::parse_stop_rules(item)});
  if (mc.variants.empty()) throw InputError("--stopping is empty");

  const auto res = ulfs::run_monte_carlo(mc);
  std::size_t failed = 0;
  for (const auto& r : res.replicates) {
    if (!r.ok) {
      ++failed;
      std::cerr << "replicate " << r.index << " failed: " << r.error << "\n";
    }
  }
  if (failed == res.replicates.size()) throw ulfs::NumericalError("every replicate failed");

  std::ostringstream csv;
  ulfs::write_summary_csv(csv, res.summaries);
  if (!s.has("output")) {
    std::cout << csv.str();
    return kExitOk;
  }
  const auto prefix = s.str("output", "");
  auto write = [](const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write output file '" + path + "'");
    out << text;
  };
  write(prefix + ".csv", csv.str());
  write(prefix + ".json", ulfs::to_json(res).dump(2) + "\n");
  std::ostringstream hist;
  ulfs::write_histogram_csv(hist, res);
  write(prefix + "_hist.csv", hist.str());
  return kExitOk;
}

int cmd_diagnose(const Settings& s, bool negate) {
  ulfs::Sample sample;
  if (s.has("input")) {
    sample = load_sample(s);
  } else {
    const auto dgp = ulfs::dgp_by_id(s.str("dgp", "DGP1"));
    sample = ulfs::sample_dgp(dgp, at_least(s, "n", 100, 10), s.integer("seed", 20240601)).sample;
  }
  // Without explicit rules the flow runs all max_iters steps so every iteration is checked.
  auto fc = flow_config(s, "global", "none", false);
  if (negate) fc.direction_sign = -1.0;
  const auto prep = prepare(sample, s, fc.mode);
  const auto trace = ulfs::run_flow(prep.initial, sample, prep.kernel, fc);
  const auto table = ulfs::check_flow_invariants(trace);

  std::ostringstream out;
  out << std::left << std::setw(24) << "invariant" << std::setw(8) << "status" << std::setw(15) << "first_failure"
      << "worst_margin\n";
  json rows = json::array();
  const ulfs::InvariantResult* first_bad = nullptr;
  for (const auto& r : table) {
    out << std::setw(24) << r.name << std::setw(8) << (r.passed ? "PASS" : "FAIL") << std::setw(15)
        << (r.passed ? std::string("-") : std::to_string(r.first_failure)) << ulfs::format_number(r.worst) << "\n";
    rows.push_back({{"invariant", r.name}, {"passed", r.passed}, {"first_failure", r.first_failure},
                    {"worst_margin", r.worst}});
    if (!r.passed && (!first_bad || r.first_failure < first_bad->first_failure)) first_bad = &r;
  }
  out << "iterations " << trace.iterations << ", stop reason " << ulfs::to_string(trace.reason) << "\n";
  std::cout << out.str();
  if (s.has("output")) {
    json j{{"invariants", rows}, {"flow", ulfs::to_json(trace)}};
    std::ofstream f(s.str("output", ""));
    if (!f) throw InputError("cannot write output file '" + s.str("output", "") + "'");
    f << j.dump(2) << "\n";
  }
  if (first_bad) {
    std::cerr << "invariant violation: " << first_bad->name << " at iteration " << first_bad->first_failure << "\n";
    return kExitInvariant;
  }
  return kExitOk;
}

int cmd_truths(const Settings& s) {
  const auto dgp = ulfs::dgp_by_id(s.str("dgp", "DGP1"));
  const auto t = ulfs::load_or_create_truth(s.str("truths_file", ULFS_KDPE_TRUTHS_DEFAULT), dgp);
  json j = ulfs::to_json(t);
  j["dgp"] = dgp.id;
  emit(s, j.dump(2) + "\n");
  return kExitOk;
}

int exit_code(const ulfs::Error& e) {
  switch (e.kind()) {
    case ulfs::ErrorKind::Input:
    case ulfs::ErrorKind::Domain: return kExitInput;
    case ulfs::ErrorKind::Numerical: return kExitNumerical;
    case ulfs::ErrorKind::Invariant: return kExitInvariant;
  }
  return kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel density flow estimator for ATE, risk ratio and odds ratio"};
  app.require_subcommand(1);

  std::map<std::string, std::string> raw;
  std::vector<std::pair<CLI::App*, std::vector<CLI::Option*>>> registered;
  std::string config_path;
  bool negate = false;

  auto add_common = [&](CLI::App* sub, std::initializer_list<std::pair<const char*, const char*>> opts) {
    std::vector<CLI::Option*> list;
    for (const auto& [name, help] : opts) {
      list.push_back(sub->add_option(std::string("--") + name, raw[normalize_key(name)], help));
    }
    sub->add_option("--config", config_path, "JSON config file (default: $ULFS_KDPE_CONFIG)");
    sub->add_flag("--negate-direction", negate)->group("");
    registered.emplace_back(sub, std::move(list));
  };

  const std::pair<const char*, const char*> kInput{"input", "CSV with header x1..xd,a,y"};
  const std::pair<const char*, const char*> kOutput{"output", "output path (simulate: file prefix)"};
  const std::pair<const char*, const char*> kSigma{"sigma", "kernel bandwidth, or 'median'"};
  const std::pair<const char*, const char*> kDelta{"delta", "Euler step size"};
  const std::pair<const char*, const char*> kIters{"max-iters", "iteration limit"};
  const std::pair<const char*, const char*> kDeltaN{"delta-n", "score target: stop once s_t <= delta-n"};
  const std::pair<const char*, const char*> kStop{"stopping", "stopping rules, e.g. sc1,sc3 or none"};
  const std::pair<const char*, const char*> kMode{"norm-mode", "global | xfixed"};
  const std::pair<const char*, const char*> kDgp{"dgp", "DGP1 | DGP2"};
  const std::pair<const char*, const char*> kN{"n", "sample size"};
  const std::pair<const char*, const char*> kReps{"reps", "Monte Carlo replicates"};
  const std::pair<const char*, const char*> kSeed{"seed", "master seed"};
  const std::pair<const char*, const char*> kJobs{"jobs", "worker threads"};
  const std::pair<const char*, const char*> kFloor{"floor", "lower bound on conditional probabilities"};
  const std::pair<const char*, const char*> kScale{"binary-scale", "scale of a and y in the kernel distance"};

  auto* est = app.add_subcommand("estimate", "run the flow on a CSV sample and report ATE, RR, OR");
  add_common(est, {kInput, kOutput, kSigma, kDelta, kIters, kDeltaN, kStop, kMode, kSeed, kFloor, kScale});
  auto* sim = app.add_subcommand("simulate", "Monte Carlo study on DGP1 or DGP2");
  add_common(sim, {kOutput, kSigma, kDelta, kIters, kDeltaN, kStop, kMode, kDgp, kN, kReps, kSeed, kJobs, kFloor,
                   kScale});
  auto* diag = app.add_subcommand("diagnose", "run the flow and check its invariants at every iteration");
  add_common(diag, {kInput, kOutput, kSigma, kDelta, kIters, kDeltaN, kStop, kMode, kDgp, kN, kSeed, kFloor, kScale});
  auto* tru = app.add_subcommand("truths", "print oracle target values for a DGP");
  add_common(tru, {kOutput, kDgp, {"truths-file", "golden truth file (regenerated if missing)"}});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    Settings settings;
    if (config_path.empty()) {
      if (const char* env = std::getenv("ULFS_KDPE_CONFIG"); env && *env) config_path = env;
    }
    if (!config_path.empty()) settings.load_config(config_path);
    for (const auto& [sub, opts] : registered) {
      if (!sub->parsed()) continue;
      for (auto* o : opts) {
        if (o->count()) {
          const auto key = normalize_key(o->get_name().substr(2));
          settings.set_flag(key, raw[key]);
        }
      }
    }
    if (est->parsed()) return cmd_estimate(settings, negate);
    if (sim->parsed()) return cmd_simulate(settings);
    if (diag->parsed()) return cmd_diagnose(settings, negate);
    return cmd_truths(settings);
  } catch (const ulfs::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
}
