#pragma once

// Initial estimators for the treatment mechanism e(a|x) and the outcome regression q(y|a,x).
// A small stacked library {sample mean, logistic GLM, Nadaraya-Watson smoothers} combined by
// cross-validated log-loss.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ulfs/error.hpp"
#include "ulfs/numeric.hpp"
#include "ulfs/observation.hpp"

namespace ulfs {

inline constexpr double kPredictionClamp = 1e-6;

inline double clamp_probability(double p) {
  return std::clamp(p, kPredictionClamp, 1.0 - kPredictionClamp);
}

using FeatureMatrix = std::vector<std::vector<double>>;

/// A fitted probability model. Output is always clamped to [1e-6, 1 - 1e-6].
struct Predictor {
  std::string learner_id;
  std::function<double(std::span<const double>)> fn;
  bool flagged = false;  ///< Fit needed a fallback (ridge, mean model, learner exclusion).
  std::string note;

  double operator()(std::span<const double> features) const { return clamp_probability(fn(features)); }
};

/// A learner turns (features, labels) into a Predictor.
struct Learner {
  std::string id;
  std::function<Predictor(const FeatureMatrix&, std::span<const int>)> fit;
};

namespace detail {

inline void check_training_data(const FeatureMatrix& features, std::span<const int> labels) {
  if (features.size() != labels.size()) throw DomainError("features and labels differ in length");
  if (labels.empty()) throw DomainError("cannot fit on an empty sample");
  const std::size_t d = features.front().size();
  for (const auto& row : features) {
    if (row.size() != d) throw DomainError("ragged feature matrix");
    for (double v : row) {
      if (!std::isfinite(v)) throw DomainError("non-finite feature value");
    }
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw DomainError("labels must be binary");
  }
}

struct Standardizer {
  std::vector<double> center;
  std::vector<double> scale;

  static Standardizer fit(const FeatureMatrix& features) {
    const std::size_t d = features.front().size();
    const double n = static_cast<double>(features.size());
    Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
    for (std::size_t k = 0; k < d; ++k) {
      double m = 0.0;
      for (const auto& row : features) m += row[k];
      m /= n;
      double v = 0.0;
      for (const auto& row : features) v += (row[k] - m) * (row[k] - m);
      const double sd = std::sqrt(v / n);
      s.center[k] = m;
      s.scale[k] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
  }

  double apply(std::size_t k, double v) const { return (v - center[k]) / scale[k]; }
};

}  // namespace detail

/// Constant predictor at the clamped sample mean.
inline Predictor fit_mean(std::span<const int> labels) {
  if (labels.empty()) throw DomainError("fit_mean needs at least one label");
  double s = 0.0;
  for (int y : labels) s += y;
  const double p = clamp_probability(s / static_cast<double>(labels.size()));
  return Predictor{"mean", [p](std::span<const double>) { return p; }};
}

struct LogisticConfig {
  int max_iters = 200;
  double grad_tol = 1e-8;
  double ridge = 1e-4;            ///< Penalty used by the separation fallback.
  double separation_bound = 30.0;  ///< |coef| on standardized features beyond which we call it separated.
};

/// Fitted logistic model, coefficients on the original feature scale.
struct LogisticModel {
  double intercept = 0.0;
  std::vector<double> coef;
  bool ridge_fallback = false;
  bool mean_fallback = false;
  int iterations = 0;

  double predict(std::span<const double> f) const {
    double z = intercept;
    for (std::size_t k = 0; k < coef.size(); ++k) z += coef[k] * f[k];
    return clamp_probability(expit(z));
  }
};

namespace detail {

// Newton-Raphson on mean log-loss + ridge/2 |beta|^2 over standardized features with an intercept
// column. Returns false when the iteration diverges or fails to reach the gradient tolerance.
inline bool newton_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double ridge,
                            const LogisticConfig& cfg, Eigen::VectorXd& beta, int& iters) {
  const auto n = static_cast<double>(X.rows());
  const Eigen::Index p = X.cols();
  beta = Eigen::VectorXd::Zero(p);
  auto objective = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd z = X * b;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      // log(1 + e^z) - y z, computed stably
      const double zi = z[i];
      loss += (zi > 0 ? zi + std::log1p(std::exp(-zi)) : std::log1p(std::exp(zi))) - y[i] * zi;
    }
    return loss / n + 0.5 * ridge * b.squaredNorm();
  };
  double f = objective(beta);
  for (iters = 0; iters < cfg.max_iters; ++iters) {
    const Eigen::VectorXd z = X * beta;
    Eigen::VectorXd mu(z.size()), w(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      mu[i] = expit(z[i]);
      w[i] = mu[i] * (1.0 - mu[i]);
    }
    const Eigen::VectorXd grad = X.transpose() * (mu - y) / n + ridge * beta;
    if (grad.lpNorm<Eigen::Infinity>() <= cfg.grad_tol) return true;
    Eigen::MatrixXd H = X.transpose() * w.asDiagonal() * X / n;
    H.diagonal().array() += ridge + 1e-12;
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    if (!step.allFinite()) return false;
    double t = 1.0;
    Eigen::VectorXd next = beta - step;
    double fn = objective(next);
    while (fn > f + 1e-15 * std::abs(f) && t > 1e-10) {
      t *= 0.5;
      next = beta - t * step;
      fn = objective(next);
    }
    beta = next;
    f = fn;
    if (ridge == 0.0 && beta.tail(p - 1).lpNorm<Eigen::Infinity>() > cfg.separation_bound) return false;
  }
  return false;
}

}  // namespace detail

/// Logistic regression by Newton/IRLS. All-equal labels fall back to the mean model; separation
/// or non-convergence falls back to a ridge-penalized fit. Both fallbacks are flagged.
inline LogisticModel fit_logistic_model(const FeatureMatrix& features, std::span<const int> labels,
                                        const LogisticConfig& cfg = {}) {
  detail::check_training_data(features, labels);
  const std::size_t d = features.front().size();
  LogisticModel model;
  model.coef.assign(d, 0.0);
  const auto ones = std::count(labels.begin(), labels.end(), 1);
  if (ones == 0 || ones == static_cast<std::ptrdiff_t>(labels.size())) {
    model.intercept = logit(clamp_probability(static_cast<double>(ones) / static_cast<double>(labels.size())));
    model.mean_fallback = true;
    return model;
  }
  const auto st = detail::Standardizer::fit(features);
  const auto n = static_cast<Eigen::Index>(features.size());
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(d) + 1);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    for (std::size_t k = 0; k < d; ++k) X(i, static_cast<Eigen::Index>(k) + 1) = st.apply(k, features[i][k]);
    y[i] = labels[static_cast<std::size_t>(i)];
  }
  Eigen::VectorXd beta;
  int iters = 0;
  if (!detail::newton_logistic(X, y, 0.0, cfg, beta, iters)) {
    model.ridge_fallback = true;
    if (!detail::newton_logistic(X, y, cfg.ridge, cfg, beta, iters) && !beta.allFinite()) {
      throw NumericalError("logistic regression failed to converge even with ridge penalty");
    }
  }
  model.iterations = iters;
  model.intercept = beta[0];
  for (std::size_t k = 0; k < d; ++k) {
    model.coef[k] = beta[static_cast<Eigen::Index>(k) + 1] / st.scale[k];
    model.intercept -= model.coef[k] * st.center[k];
  }
  return model;
}

inline Predictor fit_logistic(const FeatureMatrix& features, std::span<const int> labels,
                              const LogisticConfig& cfg = {}) {
  auto model = std::make_shared<const LogisticModel>(fit_logistic_model(features, labels, cfg));
  Predictor p{"logistic", [model](std::span<const double> f) { return model->predict(f); }};
  if (model->mean_fallback) {
    p.flagged = true;
    p.note = "labels all equal; mean model used";
  } else if (model->ridge_fallback) {
    p.flagged = true;
    p.note = "separation detected; ridge-penalized fit used";
  }
  return p;
}

/// Nadaraya-Watson smoother with a Gaussian product kernel; `bandwidth` is in the features' own units.
inline Predictor fit_nw_smoother(const FeatureMatrix& features, std::span<const int> labels, double bandwidth) {
  if (!(bandwidth > 0.0)) throw DomainError("smoother bandwidth must be positive");
  detail::check_training_data(features, labels);
  struct Model {
    std::vector<std::vector<double>> z;
    std::vector<double> y;
    double h2;
  };
  auto m = std::make_shared<Model>();
  m->h2 = bandwidth * bandwidth;
  m->z = features;
  m->y.assign(labels.begin(), labels.end());
  auto fn = [m = std::shared_ptr<const Model>(m)](std::span<const double> f) {
    std::vector<double> d2(m->z.size());
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m->z.size(); ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < f.size(); ++k) {
        const double diff = f[k] - m->z[i][k];
        s += diff * diff;
      }
      d2[i] = s;
      dmin = std::min(dmin, s);
    }
    // Shift by the nearest distance so far-away queries do not underflow to 0/0.
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < d2.size(); ++i) {
      const double w = std::exp(-(d2[i] - dmin) / (2.0 * m->h2));
      num += w * m->y[i];
      den += w;
    }
    return num / den;
  };
  char buf[64];
  std::snprintf(buf, sizeof buf, "nw:%g", bandwidth);
  return Predictor{buf, std::move(fn)};
}

/// Learner from its id: "mean", "logistic", or "nw:<bandwidth>".
inline Learner make_learner(const std::string& id) {
  if (id == "mean") {
    return {id, [](const FeatureMatrix&, std::span<const int> y) { return fit_mean(y); }};
  }
  if (id == "logistic" || id == "glm") {
    return {"logistic", [](const FeatureMatrix& x, std::span<const int> y) { return fit_logistic(x, y); }};
  }
  if (id.rfind("nw:", 0) == 0) {
    double h = 0.0;
    try {
      h = std::stod(id.substr(3));
    } catch (const std::exception&) {
      throw InputError("bad smoother bandwidth in learner id '" + id + "'");
    }
    if (!(h > 0.0)) throw InputError("smoother bandwidth must be positive in '" + id + "'");
    return {id, [h](const FeatureMatrix& x, std::span<const int> y) { return fit_nw_smoother(x, y, h); }};
  }
  throw InputError("unknown learner '" + id + "'");
}

inline std::vector<Learner> make_learners(const std::vector<std::string>& ids) {
  std::vector<Learner> out;
  for (const auto& id : ids) out.push_back(make_learner(id));
  return out;
}

inline double log_loss(std::span<const double> p, std::span<const int> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = clamp_probability(p[i]);
    s -= y[i] ? std::log(q) : std::log1p(-q);
  }
  return s / static_cast<double>(p.size());
}

struct StackConfig {
  int k_folds = 5;
  int eg_steps = 500;
  double eg_step = 0.1;
  std::uint64_t seed = 0;
};

struct StackedFit {
  Predictor predictor;
  std::vector<std::string> learner_ids;  ///< Learners that survived; aligned with `weights`.
  std::vector<double> weights;
  std::vector<double> cv_loss;           ///< Per-learner CV log-loss, aligned with `weights`.
  double stacked_cv_loss = 0.0;
  std::vector<std::string> excluded;     ///< Learners that threw during fitting.
  std::vector<std::size_t> folds;        ///< Fold index per observation.
};

/// Fold index per observation from a seeded permutation.
inline std::vector<std::size_t> assign_folds(std::size_t n, int k_folds, std::uint64_t seed) {
  Rng rng(seed);
  const auto perm = rng.permutation(n);
  std::vector<std::size_t> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[perm[i]] = i % static_cast<std::size_t>(k_folds);
  return fold;
}

/// Convex combination of learners minimizing k-fold CV log-loss over the simplex.
inline StackedFit fit_stacked(const FeatureMatrix& features, std::span<const int> labels,
                              const std::vector<Learner>& learners, const StackConfig& cfg = {}) {
  detail::check_training_data(features, labels);
  if (cfg.k_folds < 2) throw DomainError("stacking needs at least two folds");
  if (learners.empty()) throw DomainError("stacking needs at least one learner");
  const std::size_t n = features.size();
  if (n < static_cast<std::size_t>(cfg.k_folds)) throw DomainError("fewer observations than folds");

  StackedFit out;
  out.folds = assign_folds(n, cfg.k_folds, cfg.seed);

  std::vector<std::vector<double>> cv_preds;  // one column per surviving learner
  std::vector<const Learner*> kept;
  for (const auto& learner : learners) {
    std::vector<double> z(n);
    try {
      for (int f = 0; f < cfg.k_folds; ++f) {
        FeatureMatrix xt;
        std::vector<int> yt;
        for (std::size_t i = 0; i < n; ++i) {
          if (out.folds[i] != static_cast<std::size_t>(f)) {
            xt.push_back(features[i]);
            yt.push_back(labels[i]);
          }
        }
        const Predictor p = learner.fit(xt, yt);
        for (std::size_t i = 0; i < n; ++i) {
          if (out.folds[i] == static_cast<std::size_t>(f)) z[i] = p(features[i]);
        }
      }
      for (double v : z) {
        if (!std::isfinite(v)) throw NumericalError("non-finite CV prediction");
      }
    } catch (const Error&) {
      out.excluded.push_back(learner.id);
      continue;
    }
    cv_preds.push_back(std::move(z));
    kept.push_back(&learner);
  }
  if (kept.empty()) throw NumericalError("every learner in the stack failed");

  const std::size_t L = kept.size();
  for (const auto& z : cv_preds) out.cv_loss.push_back(log_loss(z, labels));

  auto combine = [&](const std::vector<double>& w) {
    std::vector<double> p(n, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t i = 0; i < n; ++i) p[i] += w[l] * cv_preds[l][i];
    }
    return p;
  };

  // Exponentiated-gradient descent on the simplex.
  std::vector<double> w(L, 1.0 / static_cast<double>(L));
  if (L > 1) {
    for (int step = 0; step < cfg.eg_steps; ++step) {
      const auto p = combine(w);
      std::vector<double> grad(L, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double q = clamp_probability(p[i]);
        const double dq = labels[i] ? -1.0 / q : 1.0 / (1.0 - q);
        for (std::size_t l = 0; l < L; ++l) grad[l] += dq * cv_preds[l][i];
      }
      double total = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        w[l] *= std::exp(-cfg.eg_step * grad[l] / static_cast<double>(n));
        total += w[l];
      }
      for (auto& v : w) v /= total;
    }
  }
  double best = log_loss(combine(w), labels);
  // EG may stop short of the optimum; never do worse than the best single learner.
  for (std::size_t l = 0; l < L; ++l) {
    if (out.cv_loss[l] < best) {
      best = out.cv_loss[l];
      w.assign(L, 0.0);
      w[l] = 1.0;
    }
  }
  out.stacked_cv_loss = best;
  out.weights = w;

  std::vector<Predictor> full;
  std::string id = "stack[";
  for (std::size_t l = 0; l < L; ++l) {
    out.learner_ids.push_back(kept[l]->id);
    full.push_back(w[l] > 0.0 ? kept[l]->fit(features, labels) : Predictor{kept[l]->id, nullptr});
    id += (l ? "," : "") + kept[l]->id;
  }
  id += "]";
  auto fn = [full, w](std::span<const double> f) {
    double p = 0.0;
    for (std::size_t l = 0; l < full.size(); ++l) {
      if (w[l] > 0.0) p += w[l] * full[l](f);
    }
    return p;
  };
  out.predictor = Predictor{id, std::move(fn), !out.excluded.empty(),
                            out.excluded.empty() ? "" : "some learners were excluded from the stack"};
  return out;
}

/// Fitted treatment mechanism and outcome regression.
///   propensity: features x,        predicts P(A = 1 | x)
///   outcome:    features (x, a),   predicts P(Y = 1 | a, x)
struct NuisanceFit {
  Predictor propensity;
  Predictor outcome;
  std::string learner_id;

  double prob_treated(std::span<const double> x) const { return propensity(x); }

  double outcome_mean(std::span<const double> x, int a) const {
    std::vector<double> f(x.begin(), x.end());
    f.push_back(static_cast<double>(a));
    return outcome(f);
  }
};

struct NuisanceConfig {
  std::vector<std::string> propensity_learners{"mean", "logistic", "nw:0.1", "nw:0.2", "nw:0.4"};
  std::vector<std::string> outcome_learners{"mean", "logistic", "nw:0.1", "nw:0.2", "nw:0.4"};
  int k_folds = 5;
};

inline FeatureMatrix outcome_features(const Sample& sample) {
  FeatureMatrix f;
  f.reserve(sample.size());
  for (const auto& o : sample) {
    auto row = o.x;
    row.push_back(static_cast<double>(o.a));
    f.push_back(std::move(row));
  }
  return f;
}

/// Fits both nuisances by stacking. Fold assignment is seeded by `seed`.
inline NuisanceFit fit_nuisance(const Sample& sample, const NuisanceConfig& cfg, std::uint64_t seed) {
  if (sample.size() < 2) throw DomainError("need at least two observations to fit nuisances");
  const FeatureMatrix xs = covariates_of(sample);
  std::vector<int> a, y;
  for (const auto& o : sample) {
    a.push_back(o.a);
    y.push_back(o.y);
  }
  StackConfig sc;
  sc.k_folds = cfg.k_folds;
  sc.seed = derive_seed(seed, 1);
  auto g = fit_stacked(xs, a, make_learners(cfg.propensity_learners), sc);
  sc.seed = derive_seed(seed, 2);
  auto q = fit_stacked(outcome_features(sample), y, make_learners(cfg.outcome_learners), sc);
  NuisanceFit fit{g.predictor, q.predictor, "g=" + g.predictor.learner_id + ";q=" + q.predictor.learner_id};
  return fit;
}

}  // namespace ulfs
