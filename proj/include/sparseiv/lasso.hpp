#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sparseiv/data.hpp"
#include "sparseiv/errors.hpp"
#include "sparseiv/math.hpp"

namespace sparseiv {

/// Penalty level and per-coefficient loadings for one first-stage equation.
struct PenaltyPlan {
  double lambda = 0.0;
  Vec loadings;        // p, strictly positive
  double c = 1.1;
  double gamma = 0.1;
  enum class Stage { initial, refined } stage = Stage::initial;
  int refine_iter = 0;  // 0 for initial, k for the k-th refinement
};

/// lambda = 2 c sqrt(n) * Phi^{-1}(1 - gamma / (2 k_e p)).
inline double penalty_level(Eigen::Index n, Eigen::Index p, Eigen::Index k_e,
                            double c, double gamma) {
  if (n < 1 || p < 1 || k_e < 1)
    throw ValidationError("penalty_level: n, p, k_e must be positive");
  if (!(c > 1.0)) throw ValidationError("penalty_level: c must exceed 1");
  if (!(gamma > 0.0 && gamma < 1.0))
    throw ValidationError("penalty_level: gamma must lie in (0,1)");
  const double tail = gamma / (2.0 * static_cast<double>(k_e) * static_cast<double>(p));
  if (tail >= 0.5) throw ValidationError("penalty level nonpositive");
  return 2.0 * c * std::sqrt(static_cast<double>(n)) * normal_quantile(1.0 - tail);
}

/// The recommended confidence level gamma = 0.1 / log(p v n).
inline double auto_gamma(Eigen::Index n, Eigen::Index p) {
  return 0.1 / std::log(static_cast<double>(std::max(n, p)));
}

/// Initial loadings: gamma_j = sqrt(E_n[f_j^2 (d - dbar)^2]).
inline Vec initial_loadings(const Mat& f, const Vec& d) {
  if (f.rows() != d.size()) throw ValidationError("initial_loadings: row mismatch");
  const double n = static_cast<double>(f.rows());
  const Vec dc = d.array() - d.mean();
  Vec g(f.cols());
  std::string zeros;
  for (Eigen::Index j = 0; j < f.cols(); ++j) {
    g[j] = std::sqrt((f.col(j).array().square() * dc.array().square()).sum() / n);
    if (g[j] <= 0.0) {
      if (!zeros.empty()) zeros += ", ";
      zeros += std::to_string(j);
    }
  }
  if (!zeros.empty())
    throw ValidationError("initial_loadings: zero loadings for instruments: " + zeros);
  return g;
}

/// Refined loadings: gamma_j = sqrt(E_n[f_j^2 vhat^2]).
inline Vec refined_loadings(const Mat& f, const Vec& residuals) {
  if (f.rows() != residuals.size())
    throw ValidationError("refined_loadings: row mismatch");
  if (residuals.squaredNorm() == 0.0)
    throw ValidationError("perfect first-stage fit; refined loadings degenerate");
  const double n = static_cast<double>(f.rows());
  Vec g(f.cols());
  std::string zeros;
  for (Eigen::Index j = 0; j < f.cols(); ++j) {
    g[j] = std::sqrt((f.col(j).array().square() * residuals.array().square()).sum() / n);
    if (g[j] <= 0.0) {
      if (!zeros.empty()) zeros += ", ";
      zeros += std::to_string(j);
    }
  }
  if (!zeros.empty())
    throw ValidationError("refined_loadings: zero loadings for instruments: " + zeros);
  return g;
}

struct LassoOptions {
  double tol = 1e-9;          // prediction-scale coefficient-change tolerance
  long max_sweeps = 100000;
  bool intercept = true;      // unpenalized intercept via centering
  double kkt_factor = 1e-8;   // exit when per-coordinate violation <= factor * (lambda/n) * loading
  bool track_objective = false;
};

struct LassoFit {
  Vec beta;                  // p, exact zeros off support
  double intercept = 0.0;
  std::vector<int> support;  // {j : beta_j != 0}
  double objective = 0.0;    // Qhat + (lambda/n) * sum_j loading_j |beta_j|
  long sweeps = 0;
  double kkt_gap = 0.0;      // max raw subgradient violation
  double lambda = 0.0;
  std::vector<double> objective_trace;  // per sweep, when requested
};

/// Raised when coordinate descent exhausts its sweep budget; carries the
/// best iterate reached and its subgradient gap.
struct LassoNonConvergence : NumericError {
  LassoFit best;
  explicit LassoNonConvergence(LassoFit fit)
      : NumericError("lasso: no convergence after " + std::to_string(fit.sweeps) +
                     " sweeps (kkt gap " + std::to_string(fit.kkt_gap) + ")"),
        best(std::move(fit)) {}
};

namespace detail {

inline double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

}  // namespace detail

/// Weighted Lasso by cyclic coordinate descent with covariance updates and
/// an active-set outer loop. Minimizes
///   E_n[(d_i - mu - f_i'beta)^2] + (lambda/n) sum_j loading_j |beta_j|
/// with mu the optional unpenalized intercept. Zeros are exact: a
/// coefficient is zero iff its soft-threshold update returns zero.
inline LassoFit solve_weighted_lasso(const Mat& f, const Vec& d,
                                     const PenaltyPlan& plan,
                                     const LassoOptions& opts = {},
                                     const Vec* warm_start = nullptr) {
  const Eigen::Index n = f.rows(), p = f.cols();
  if (d.size() != n) throw ValidationError("lasso: row mismatch");
  if (plan.loadings.size() != p)
    throw ValidationError("lasso: loadings length does not match instrument count");
  if (!f.allFinite() || !d.allFinite() || !plan.loadings.allFinite())
    throw ValidationError("lasso: non-finite input");
  if (plan.lambda < 0.0) throw ValidationError("lasso: negative penalty level");
  if (plan.lambda > 0.0 && (plan.loadings.array() <= 0.0).any())
    throw ValidationError("lasso: loadings must be strictly positive");

  const double nn = static_cast<double>(n);
  const Vec fmean = opts.intercept ? Vec(f.colwise().mean()) : Vec(Vec::Zero(p));
  const double dmean = opts.intercept ? d.mean() : 0.0;

  // Centered second moments (1/n convention):
  //   G = E_n[f_c f_c'], cvec = E_n[f_c d_c], dd = E_n[d_c^2].
  Mat G = (f.transpose() * f) / nn;
  if (opts.intercept) G.noalias() -= fmean * fmean.transpose();
  Vec cvec = (f.transpose() * d) / nn;
  if (opts.intercept) cvec.noalias() -= fmean * dmean;
  const double dd = d.squaredNorm() / nn - dmean * dmean;
  const Vec gdiag = G.diagonal();

  const double resp_scale = std::sqrt(std::max(dd, 0.0));
  const double coef_tol = opts.tol * std::max(resp_scale, 1e-300);

  Vec beta = Vec::Zero(p);
  if (warm_start != nullptr && warm_start->size() == p) beta = *warm_start;
  Vec gbeta = G * beta;  // maintained as G * beta

  // Per-coordinate thresholds t_j = lambda * loading_j / (2n).
  Vec thresh = plan.loadings * (plan.lambda / (2.0 * nn));

  std::vector<char> in_active(static_cast<std::size_t>(p), 0);
  std::vector<int> active;
  active.reserve(64);
  for (Eigen::Index j = 0; j < p; ++j) {
    if (beta[j] != 0.0) {
      in_active[static_cast<std::size_t>(j)] = 1;
      active.push_back(static_cast<int>(j));
    }
  }

  LassoFit fit;
  fit.lambda = plan.lambda;

  auto update_coord = [&](int j) -> double {
    if (gdiag[j] <= 0.0) return 0.0;  // constant column under centering
    const double old = beta[j];
    const double rho = cvec[j] - gbeta[j] + gdiag[j] * old;
    const double nb = detail::soft_threshold(rho, thresh[j]) / gdiag[j];
    if (nb != old) {
      beta[j] = nb;
      gbeta.noalias() += G.col(j) * (nb - old);
    }
    return std::abs((nb - old)) * std::sqrt(gdiag[j]);
  };

  auto record_objective = [&]() {
    if (!opts.track_objective) return;
    const double q = dd - 2.0 * cvec.dot(beta) + beta.dot(gbeta);
    const double pen =
        (plan.lambda / nn) * (plan.loadings.array() * beta.array().abs()).sum();
    fit.objective_trace.push_back(q + pen);
  };

  long sweeps = 0;
  bool converged = false;
  while (sweeps < opts.max_sweeps) {
    // Full pass: visits every coordinate, grows the active set.
    double max_change = 0.0;
    ++sweeps;
    for (Eigen::Index j = 0; j < p; ++j) {
      max_change = std::max(max_change, update_coord(static_cast<int>(j)));
      if (beta[j] != 0.0 && !in_active[static_cast<std::size_t>(j)]) {
        in_active[static_cast<std::size_t>(j)] = 1;
        active.push_back(static_cast<int>(j));
      }
    }
    record_objective();

    // Inner loop on the active set.
    while (max_change > coef_tol && sweeps < opts.max_sweeps) {
      ++sweeps;
      max_change = 0.0;
      for (int j : active) max_change = std::max(max_change, update_coord(j));
      record_objective();
    }

    // Exact KKT scan over all coordinates. g_j = 2 E_n[f_j (d - mu - f'beta)].
    double gap = 0.0;
    bool ok = true;
    for (Eigen::Index j = 0; j < p; ++j) {
      const double gj = 2.0 * (cvec[j] - gbeta[j]);
      const double lim = 2.0 * thresh[j];  // lambda * loading_j / n
      double viol;
      if (beta[j] != 0.0) {
        viol = std::abs(gj - (beta[j] > 0.0 ? lim : -lim));
      } else {
        viol = std::max(0.0, std::abs(gj) - lim);
      }
      gap = std::max(gap, viol);
      const double allow = plan.lambda > 0.0
                               ? opts.kkt_factor * lim
                               : coef_tol * 2.0 * std::sqrt(std::max(gdiag[j], 0.0));
      if (viol > allow) ok = false;
    }
    fit.kkt_gap = gap;
    if (ok) {
      converged = true;
      break;
    }
  }

  fit.beta = beta;
  fit.intercept = opts.intercept ? dmean - fmean.dot(beta) : 0.0;
  fit.sweeps = sweeps;
  const double q = dd - 2.0 * cvec.dot(beta) + beta.dot(gbeta);
  fit.objective =
      q + (plan.lambda / nn) * (plan.loadings.array() * beta.array().abs()).sum();
  for (Eigen::Index j = 0; j < p; ++j) {
    if (beta[j] != 0.0) fit.support.push_back(static_cast<int>(j));
  }
  if (!converged) throw LassoNonConvergence(std::move(fit));
  return fit;
}

struct PostLassoOptions {
  bool intercept = true;
  // Lasso support, when known, to check the amelioration-set bound
  // |I \ T| <= 1 v |T|.
  std::optional<std::vector<int>> lasso_support;
};

struct PostLassoFit {
  Vec beta;                   // p, zeros off the included set
  double intercept = 0.0;
  std::vector<int> included;  // as requested
  std::vector<int> dropped;   // dependent columns dropped before refit
  double resid_variance = 0.0;  // E_n[vhat^2]
  Eigen::Index rank = 0;
  bool augmentation_warning = false;
};

/// OLS refit on the included instrument set (QR based, rank guarded).
inline PostLassoFit post_lasso(const Mat& f, const Vec& d,
                               const std::vector<int>& included,
                               const PostLassoOptions& opts = {}) {
  const Eigen::Index n = f.rows(), p = f.cols();
  if (d.size() != n) throw ValidationError("post_lasso: row mismatch");
  for (int j : included) {
    if (j < 0 || j >= p) throw ValidationError("post_lasso: included index out of range");
  }
  const Eigen::Index k = static_cast<Eigen::Index>(included.size());
  if (k + (opts.intercept ? 1 : 0) >= n)
    throw ValidationError("post_lasso: included set as large as the sample");

  PostLassoFit fit;
  fit.included = included;
  fit.beta = Vec::Zero(p);

  if (opts.lasso_support.has_value()) {
    std::vector<int> extra;
    const auto& t = *opts.lasso_support;
    for (int j : included) {
      if (std::find(t.begin(), t.end(), j) == t.end()) extra.push_back(j);
    }
    const std::size_t bound = std::max<std::size_t>(1, t.size());
    fit.augmentation_warning = extra.size() > bound;
  }

  std::vector<int> kept = included;
  if (k > 0) {
    Mat X(n, k + (opts.intercept ? 1 : 0));
    for (Eigen::Index i = 0; i < k; ++i) X.col(i) = f.col(included[static_cast<std::size_t>(i)]);
    if (opts.intercept) X.col(k).setOnes();

    auto qr = detail::pivoted_qr(X);
    if (qr.rank < X.cols()) {
      // Drop dependent columns (pivot order beyond the numerical rank), refit.
      const auto perm = qr.qr.colsPermutation().indices();
      std::vector<char> keep(static_cast<std::size_t>(X.cols()), 0);
      for (Eigen::Index i = 0; i < qr.rank; ++i) keep[static_cast<std::size_t>(perm[i])] = 1;
      std::vector<int> kept2;
      for (Eigen::Index i = 0; i < k; ++i) {
        if (keep[static_cast<std::size_t>(i)]) {
          kept2.push_back(included[static_cast<std::size_t>(i)]);
        } else {
          fit.dropped.push_back(included[static_cast<std::size_t>(i)]);
        }
      }
      kept = std::move(kept2);
      Mat X2(n, static_cast<Eigen::Index>(kept.size()) + (opts.intercept ? 1 : 0));
      for (std::size_t i = 0; i < kept.size(); ++i) X2.col(static_cast<Eigen::Index>(i)) = f.col(kept[i]);
      if (opts.intercept) X2.col(static_cast<Eigen::Index>(kept.size())).setOnes();
      qr = detail::pivoted_qr(X2);
      const Vec coef = qr.qr.solve(d);
      for (std::size_t i = 0; i < kept.size(); ++i) fit.beta[kept[i]] = coef[static_cast<Eigen::Index>(i)];
      if (opts.intercept) fit.intercept = coef[static_cast<Eigen::Index>(kept.size())];
      fit.rank = qr.rank;
    } else {
      const Vec coef = qr.qr.solve(d);
      for (Eigen::Index i = 0; i < k; ++i) fit.beta[included[static_cast<std::size_t>(i)]] = coef[i];
      if (opts.intercept) fit.intercept = coef[k];
      fit.rank = qr.rank;
    }
  } else {
    fit.intercept = opts.intercept ? d.mean() : 0.0;
    fit.rank = opts.intercept ? 1 : 0;
  }

  const Vec resid = d - f * fit.beta - Vec::Constant(n, fit.intercept);
  fit.resid_variance = resid.squaredNorm() / static_cast<double>(n);
  return fit;
}

}  // namespace sparseiv
