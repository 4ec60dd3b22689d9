#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ulfs/error.hpp"

namespace ulfs {

/// One draw O = (X, A, Y): continuous covariates, binary treatment, binary outcome.
struct Observation {
  std::vector<double> x;
  int a = 0;
  int y = 0;

  void validate() const {
    if (x.empty()) throw DomainError("observation has no covariates");
    for (double v : x) {
      if (!std::isfinite(v)) throw DomainError("observation has a non-finite covariate");
    }
    if (a != 0 && a != 1) throw DomainError("treatment must be 0 or 1, got " + std::to_string(a));
    if (y != 0 && y != 1) throw DomainError("outcome must be 0 or 1, got " + std::to_string(y));
  }

  friend bool operator==(const Observation&, const Observation&) = default;
};

using Sample = std::vector<Observation>;

inline std::vector<std::vector<double>> covariates_of(const Sample& sample) {
  std::vector<std::vector<double>> xs;
  xs.reserve(sample.size());
  for (const auto& o : sample) xs.push_back(o.x);
  return xs;
}

}  // namespace ulfs
