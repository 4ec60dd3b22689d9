#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ulfs/error.hpp"
#include "ulfs/numeric.hpp"
#include "ulfs/observation.hpp"

namespace ulfs {

struct KernelConfig {
  double sigma = 1.0;         ///< Gaussian bandwidth.
  double binary_scale = 1.0;  ///< Multiplier on the a and y coordinates in the distance.

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw DomainError("kernel bandwidth must be positive");
    if (!(binary_scale > 0.0) || !std::isfinite(binary_scale)) {
      throw DomainError("binary_scale must be positive");
    }
  }
};

/// Squared Euclidean distance between (x, s*a, s*y) embeddings.
inline double embedded_sq_distance(const Observation& o, const Observation& o2, double binary_scale) {
  if (o.x.size() != o2.x.size()) throw DomainError("observations have different covariate dimensions");
  double d2 = 0.0;
  for (std::size_t k = 0; k < o.x.size(); ++k) {
    const double diff = o.x[k] - o2.x[k];
    d2 += diff * diff;
  }
  const double da = binary_scale * static_cast<double>(o.a - o2.a);
  const double dy = binary_scale * static_cast<double>(o.y - o2.y);
  d2 += da * da + dy * dy;
  if (!std::isfinite(d2)) throw DomainError("non-finite coordinate in kernel argument");
  return d2;
}

inline double gauss_kernel(const Observation& o, const Observation& o2, const KernelConfig& cfg) {
  const double d2 = embedded_sq_distance(o, o2, cfg.binary_scale);
  return std::exp(-d2 / (2.0 * cfg.sigma * cfg.sigma));
}

/// Median of pairwise embedded distances over the sample.
inline double median_heuristic_sigma(const Sample& sample, double binary_scale = 1.0) {
  if (sample.size() < 2) throw DomainError("median heuristic needs at least two observations");
  std::vector<double> dist;
  dist.reserve(sample.size() * (sample.size() - 1) / 2);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    for (std::size_t j = i + 1; j < sample.size(); ++j) {
      dist.push_back(std::sqrt(embedded_sq_distance(sample[i], sample[j], binary_scale)));
    }
  }
  const double med = median(std::move(dist));
  if (!(med > 0.0)) throw DomainError("median pairwise distance is zero; pass an explicit bandwidth");
  return med;
}

/// Dense symmetric Gram matrix of the base kernel over a fixed support.
class BaseGram {
 public:
  BaseGram(const std::vector<Observation>& support, const KernelConfig& cfg) : n_(support.size()), k_(n_ * n_) {
    cfg.validate();
    for (std::size_t i = 0; i < n_; ++i) {
      k_[i * n_ + i] = 1.0;
      for (std::size_t j = i + 1; j < n_; ++j) {
        const double v = gauss_kernel(support[i], support[j], cfg);
        k_[i * n_ + j] = v;
        k_[j * n_ + i] = v;
      }
    }
  }

  std::size_t size() const { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return k_[i * n_ + j]; }
  std::span<const double> row(std::size_t i) const { return {k_.data() + i * n_, n_}; }

 private:
  std::size_t n_;
  std::vector<double> k_;
};

/// Base kernel centered at a discrete distribution P on `support`:
///   K^(P)(o, o') = K(o, o') - m_P(o) m_P(o') / kappa,  kappa = ||m_P||^2.
/// Immutable; a weight change means a new instance.
class CenteredKernel {
 public:
  CenteredKernel(KernelConfig cfg, std::shared_ptr<const std::vector<Observation>> support,
                 std::vector<double> weights, std::shared_ptr<const BaseGram> gram = nullptr)
      : cfg_(cfg), support_(std::move(support)), weights_(std::move(weights)), gram_(std::move(gram)) {
    cfg_.validate();
    if (!support_ || support_->empty()) throw DomainError("centered kernel needs a nonempty support");
    if (weights_.size() != support_->size()) throw DomainError("weights and support differ in length");
    if (gram_ && gram_->size() != support_->size()) throw DomainError("Gram matrix does not match support");
    for (double w : weights_) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("weights must be finite and nonnegative");
    }
    if (std::abs(pairwise_sum(weights_) - 1.0) > 1e-12) throw DomainError("weights must sum to one");

    const std::size_t n = support_->size();
    m_.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      if (gram_) {
        const auto r = gram_->row(i);
        for (std::size_t j = 0; j < n; ++j) s += weights_[j] * r[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) s += weights_[j] * gauss_kernel((*support_)[i], (*support_)[j], cfg_);
      }
      m_[i] = s;
    }
    double kappa = 0.0;
    for (std::size_t i = 0; i < n; ++i) kappa += weights_[i] * m_[i];
    if (!(kappa > 1e-14)) throw NumericalError("degenerate distribution: mean embedding has zero norm");
    kappa_ = kappa;
  }

  const KernelConfig& config() const { return cfg_; }
  const std::vector<Observation>& support() const { return *support_; }
  const std::shared_ptr<const std::vector<Observation>>& support_ptr() const { return support_; }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<double>& m_values() const { return m_; }
  double kappa() const { return kappa_; }
  const std::shared_ptr<const BaseGram>& gram() const { return gram_; }

  /// Base kernel between two support atoms.
  double base(std::size_t i, std::size_t j) const {
    return gram_ ? (*gram_)(i, j) : gauss_kernel((*support_)[i], (*support_)[j], cfg_);
  }

  /// Centered kernel between two support atoms.
  double eval_atoms(std::size_t i, std::size_t j) const { return base(i, j) - m_[i] * m_[j] / kappa_; }

  double mean_embedding_at(const Observation& o) const {
    double s = 0.0;
    for (std::size_t j = 0; j < support_->size(); ++j) s += weights_[j] * gauss_kernel(o, (*support_)[j], cfg_);
    return s;
  }

  double eval(const Observation& o, const Observation& o2) const {
    return gauss_kernel(o, o2, cfg_) - mean_embedding_at(o) * mean_embedding_at(o2) / kappa_;
  }

 private:
  KernelConfig cfg_;
  std::shared_ptr<const std::vector<Observation>> support_;
  std::vector<double> weights_;
  std::shared_ptr<const BaseGram> gram_;
  std::vector<double> m_;
  double kappa_ = 0.0;
};

inline double mean_embedding_at(const CenteredKernel& ck, const Observation& o) { return ck.mean_embedding_at(o); }

inline double compute_kappa(const CenteredKernel& ck) { return ck.kappa(); }

inline double centered_kernel_eval(const CenteredKernel& ck, const Observation& o, const Observation& o2) {
  return ck.eval(o, o2);
}

}  // namespace ulfs
