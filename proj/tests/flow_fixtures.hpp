#pragma once

#include "ulfs/density.hpp"
#include "ulfs/flow.hpp"
#include "ulfs/nuisance.hpp"
#include "ulfs/sims.hpp"

namespace ulfs::testing {

struct FlowSetup {
  Sample sample;
  WorkingDensity initial;
  KernelConfig kernel;
};

/// DGP draw, stacked nuisance fit, floored initial density, median-heuristic bandwidth.
inline FlowSetup dgp_setup(const Dgp& dgp, std::size_t n, std::uint64_t seed,
                           NormalizationMode mode = NormalizationMode::Global) {
  auto sample = sample_dgp(dgp, n, derive_seed(seed, 0)).sample;
  const auto fit = fit_nuisance(sample, NuisanceConfig{}, derive_seed(seed, 1));
  auto d0 = init_from_nuisance(covariates_of(sample), fit, 1e-3, mode);
  KernelConfig kc;
  kc.sigma = median_heuristic_sigma(sample);
  return {std::move(sample), std::move(d0), kc};
}

inline FlowConfig unstopped(int iters, double delta = 0.01, NormalizationMode mode = NormalizationMode::Global) {
  FlowConfig fc;
  fc.delta = delta;
  fc.max_iters = iters;
  fc.use_score_target = false;
  fc.stopping.enabled.clear();
  fc.mode = mode;
  return fc;
}

}  // namespace ulfs::testing
