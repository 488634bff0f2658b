#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sparseiv/data.hpp"
#include "sparseiv/errors.hpp"
#include "sparseiv/lasso.hpp"
#include "sparseiv/math.hpp"

namespace sparseiv {

/// Critical value Lambda(1-gamma) = c sqrt(n) Phi^{-1}(1 - gamma/(2p)).
inline double critical_value(Eigen::Index n, Eigen::Index p, double gamma, double c) {
  if (n < 1 || p < 1) throw ValidationError("critical_value: n, p must be positive");
  if (!(c > 1.0)) throw ValidationError("critical_value: c must exceed 1");
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw ValidationError("critical_value: gamma must lie in (0,1]");
  const double tail = gamma / (2.0 * static_cast<double>(p));
  if (tail > 0.5) throw ValidationError("critical_value: gamma/(2p) exceeds 1/2");
  if (tail == 0.5) return 0.0;
  return c * std::sqrt(static_cast<double>(n)) * normal_quantile(1.0 - tail);
}

/// Partialled and normalized inputs for sup-score inference.
struct SupScoreProblem {
  Vec y_tilde;   // n
  Mat d_tilde;   // n x k_e
  Mat f_tilde;   // n x p, columns normalized to E_n[f^2] = 1
  double c = 1.1;
  double gamma = 0.05;
  std::vector<int> kept_instruments;     // original index per kept column
  std::vector<int> dropped_instruments;  // zero variance after partialling

  Eigen::Index n() const { return y_tilde.size(); }
  Eigen::Index p() const { return f_tilde.cols(); }
  Eigen::Index k_e() const { return d_tilde.cols(); }

  double critical() const { return critical_value(n(), p(), gamma, c); }

  /// Partials out data.w from (y, d_endo, f), drops zero-variance columns
  /// with a record, and normalizes the rest.
  static SupScoreProblem build(const Dataset& data, double c, double gamma) {
    data.validate();
    SupScoreProblem prob;
    prob.c = c;
    prob.gamma = gamma;
    const PartialledData pd = PartialledData::from(data);
    prob.y_tilde = pd.y_tilde;
    prob.d_tilde = pd.d_tilde;
    const double n = static_cast<double>(data.n());
    std::vector<Eigen::Index> keep;
    for (Eigen::Index j = 0; j < pd.f_tilde.cols(); ++j) {
      if (pd.f_tilde.col(j).squaredNorm() / n > 0.0) {
        keep.push_back(j);
      } else {
        prob.dropped_instruments.push_back(static_cast<int>(j));
      }
    }
    if (keep.empty())
      throw ValidationError("sup score: no instrument with positive variance");
    Mat fk(pd.f_tilde.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) {
      fk.col(static_cast<Eigen::Index>(i)) = pd.f_tilde.col(keep[i]);
      prob.kept_instruments.push_back(static_cast<int>(keep[i]));
    }
    prob.f_tilde = normalize_instruments(fk).f;
    return prob;
  }
};

/// Sup-score statistic at the hypothesized alpha_1 = a:
/// max_j |n E_n[(y - d'a) f_j]| / sqrt(E_n[(y - d'a)^2 f_j^2]).
/// Columns with f_j * r identically zero contribute 0 (recorded in skipped).
inline double sup_score(const SupScoreProblem& prob, const Vec& a,
                        std::vector<int>* skipped = nullptr) {
  if (a.size() != prob.k_e())
    throw ValidationError("sup score: hypothesis dimension mismatch");
  const Vec r = prob.y_tilde - prob.d_tilde * a;
  if (r.squaredNorm() == 0.0)
    throw ValidationError("degenerate residual at tested point");
  const double n = static_cast<double>(prob.n());
  double best = 0.0;
  for (Eigen::Index j = 0; j < prob.p(); ++j) {
    const auto fj = prob.f_tilde.col(j).array();
    const double num = std::abs(n * (r.array() * fj).sum() / n);
    const double den = std::sqrt((r.array().square() * fj.square()).sum() / n);
    if (den == 0.0) {
      if (skipped != nullptr) skipped->push_back(static_cast<int>(j));
      continue;  // Cauchy-Schwarz forces num == 0 here
    }
    best = std::max(best, num / den);
  }
  return best;
}

struct RegionPoint {
  Vec a;
  double stat = 0.0;
  bool accepted = false;
  bool near_boundary = false;  // |stat - critical| < 1e-9 * critical
};

struct ConfidenceRegion {
  std::vector<RegionPoint> points;
  double critical = 0.0;
  double level = 0.95;
  bool touches_grid_boundary = false;

  std::vector<Vec> accepted() const {
    std::vector<Vec> acc;
    for (const auto& pt : points) {
      if (pt.accepted) acc.push_back(pt.a);
    }
    return acc;
  }
};

namespace detail {

/// An accepted point sitting on the envelope of the grid (any coordinate at
/// that coordinate's min or max) means the user should widen the grid.
inline bool region_touches_boundary(const std::vector<RegionPoint>& pts) {
  if (pts.empty()) return false;
  const Eigen::Index k = pts.front().a.size();
  Vec lo = pts.front().a, hi = pts.front().a;
  for (const auto& pt : pts) {
    lo = lo.cwiseMin(pt.a);
    hi = hi.cwiseMax(pt.a);
  }
  for (const auto& pt : pts) {
    if (!pt.accepted) continue;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (pt.a[i] == lo[i] || pt.a[i] == hi[i]) return true;
    }
  }
  return false;
}

}  // namespace detail

/// Grid inversion of the sup-score test: the region is exactly the set of
/// grid points with Lambda_a <= Lambda(1-gamma).
inline ConfidenceRegion invert_region(const SupScoreProblem& prob,
                                      const std::vector<Vec>& grid) {
  if (grid.empty()) throw ValidationError("invert_region: empty grid");
  ConfidenceRegion region;
  region.critical = prob.critical();
  region.level = 1.0 - prob.gamma;
  for (const auto& a : grid) {
    RegionPoint pt;
    pt.a = a;
    pt.stat = sup_score(prob, a);
    pt.accepted = pt.stat <= region.critical;
    pt.near_boundary = std::abs(pt.stat - region.critical) < 1e-9 * region.critical;
    region.points.push_back(std::move(pt));
  }
  region.touches_grid_boundary = detail::region_touches_boundary(region.points);
  return region;
}

/// Inverse-Lasso route to the same region: at each grid point run the
/// weighted Lasso of the hypothesized residual on the instruments with
/// lambda = 2 Lambda(1-gamma) and loadings sqrt(E_n[r^2 f_j^2]); the point is
/// accepted iff every coefficient is exactly zero. Must agree with
/// invert_region away from the critical boundary.
inline ConfidenceRegion inverse_lasso_region(const SupScoreProblem& prob,
                                             const std::vector<Vec>& grid) {
  if (grid.empty()) throw ValidationError("inverse_lasso_region: empty grid");
  ConfidenceRegion region;
  region.critical = prob.critical();
  region.level = 1.0 - prob.gamma;
  const double n = static_cast<double>(prob.n());
  for (const auto& a : grid) {
    RegionPoint pt;
    pt.a = a;
    const Vec r = prob.y_tilde - prob.d_tilde * a;
    if (r.squaredNorm() == 0.0)
      throw ValidationError("degenerate residual at tested point");
    // Columns with zero loading have f_j * r == 0 and stay out of the fit.
    std::vector<Eigen::Index> cols;
    for (Eigen::Index j = 0; j < prob.p(); ++j) {
      const double l2 = (r.array().square() * prob.f_tilde.col(j).array().square()).sum() / n;
      if (l2 > 0.0) cols.push_back(j);
    }
    bool all_zero = true;
    if (!cols.empty()) {
      Mat fsub(prob.n(), static_cast<Eigen::Index>(cols.size()));
      Vec loadings(static_cast<Eigen::Index>(cols.size()));
      for (std::size_t i = 0; i < cols.size(); ++i) {
        fsub.col(static_cast<Eigen::Index>(i)) = prob.f_tilde.col(cols[i]);
        loadings[static_cast<Eigen::Index>(i)] = std::sqrt(
            (r.array().square() * prob.f_tilde.col(cols[i]).array().square()).sum() / n);
      }
      PenaltyPlan plan;
      plan.lambda = 2.0 * region.critical;
      plan.loadings = loadings;
      plan.c = prob.c;
      plan.gamma = prob.gamma;
      LassoOptions lopts;
      lopts.intercept = false;  // the statistic has no intercept
      const LassoFit fit = solve_weighted_lasso(fsub, r, plan, lopts);
      all_zero = fit.support.empty();
    }
    pt.accepted = all_zero;
    pt.stat = sup_score(prob, a);
    pt.near_boundary = std::abs(pt.stat - region.critical) < 1e-9 * region.critical;
    region.points.push_back(std::move(pt));
  }
  region.touches_grid_boundary = detail::region_touches_boundary(region.points);
  return region;
}

/// Equispaced 1-D grid helper for the CLI's lo:hi:step shorthand.
inline std::vector<Vec> make_grid_1d(double lo, double hi, double step) {
  if (!(step > 0.0) || hi < lo) throw ValidationError("grid: need lo <= hi and step > 0");
  std::vector<Vec> grid;
  const Eigen::Index count = static_cast<Eigen::Index>(std::floor((hi - lo) / step + 1e-12)) + 1;
  for (Eigen::Index i = 0; i < count; ++i) {
    Vec a(1);
    a[0] = lo + step * static_cast<double>(i);
    grid.push_back(a);
  }
  return grid;
}

}  // namespace sparseiv
