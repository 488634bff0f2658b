#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sparseiv/data.hpp"
#include "sparseiv/errors.hpp"
#include "sparseiv/lasso.hpp"

namespace sparseiv {

enum class FirstStageMethod { lasso, post_lasso };

struct FirstStageConfig {
  double c = 1.1;
  std::optional<double> gamma;  // empty = 0.1 / log(p v n)
  // K bounds the total number of Lasso/Post-Lasso solves: the first uses the
  // initial loadings, each further one a refined-loading update. K = 1 is a
  // single solve under initial loadings.
  int max_loading_iters = 15;
  FirstStageMethod method = FirstStageMethod::post_lasso;
  LassoOptions solver;
  double loading_tol = 1e-8;  // relative sup-norm early stop for loadings
};

struct EquationFit {
  Vec beta;                    // p (on the kept instrument columns' indexing)
  double intercept = 0.0;
  std::vector<int> support;    // Lasso-selected set T (kept-column indices)
  LassoFit lasso;
  std::optional<PostLassoFit> post;
  std::vector<Vec> loading_history;  // loadings used at each solve
  int iterations = 0;                // refinement rounds actually run
  bool empty_selection = false;
  std::optional<int> fallback_index;  // kept-column index, when selection empty
};

struct FirstStageFit {
  std::vector<EquationFit> equations;  // k_e
  Mat dhat;                            // n x k_d optimal-instrument estimate
  double lambda = 0.0;
  double gamma_used = 0.0;
  double c = 1.1;
  FirstStageMethod method = FirstStageMethod::post_lasso;
  std::vector<int> kept_instruments;     // original column index per kept column
  std::vector<int> dropped_instruments;  // zero-variance columns dropped
  bool any_empty_selection = false;
};

/// Index of the single instrument most correlated (in absolute value) with
/// d_l; ties broken by the lowest index. Columns with undefined correlation
/// are skipped.
inline int fallback_single_instrument(const Mat& f, const Vec& d_l) {
  const double n = static_cast<double>(f.rows());
  const Vec dc = d_l.array() - d_l.mean();
  const double sd = dc.squaredNorm() / n;
  if (sd <= 0.0)
    throw ValidationError("fallback instrument: endogenous variable is constant");
  int best = -1;
  double best_abs = -1.0;
  for (Eigen::Index j = 0; j < f.cols(); ++j) {
    const Vec fc = f.col(j).array() - f.col(j).mean();
    const double sf = fc.squaredNorm() / n;
    if (sf <= 0.0) continue;
    const double corr = std::abs(fc.dot(dc) / n) / std::sqrt(sf * sd);
    if (corr > best_abs) {
      best_abs = corr;
      best = static_cast<int>(j);
    }
  }
  if (best < 0)
    throw ValidationError("fallback instrument: no instrument with defined correlation");
  return best;
}

/// Algorithm driver: initial loadings, then K rounds of refined loadings
/// computed from the residuals of the previous Lasso/Post-Lasso fit.
inline FirstStageFit fit_first_stage(const Dataset& data,
                                     const FirstStageConfig& cfg = {}) {
  data.validate();
  if (cfg.max_loading_iters < 1)
    throw ValidationError("first stage: K must be at least 1");

  FirstStageFit out;
  out.c = cfg.c;
  out.method = cfg.method;

  // Drop-and-warn policy for zero-variance instruments lives here.
  out.dropped_instruments = data.zero_variance_instruments();
  const Eigen::Index n = data.n();
  Mat f;
  if (out.dropped_instruments.empty()) {
    f = data.f;
    out.kept_instruments.resize(static_cast<std::size_t>(data.p()));
    for (Eigen::Index j = 0; j < data.p(); ++j)
      out.kept_instruments[static_cast<std::size_t>(j)] = static_cast<int>(j);
  } else {
    std::vector<char> drop(static_cast<std::size_t>(data.p()), 0);
    for (int j : out.dropped_instruments) drop[static_cast<std::size_t>(j)] = 1;
    for (Eigen::Index j = 0; j < data.p(); ++j) {
      if (!drop[static_cast<std::size_t>(j)]) out.kept_instruments.push_back(static_cast<int>(j));
    }
    f.resize(n, static_cast<Eigen::Index>(out.kept_instruments.size()));
    for (std::size_t i = 0; i < out.kept_instruments.size(); ++i)
      f.col(static_cast<Eigen::Index>(i)) = data.f.col(out.kept_instruments[i]);
  }
  const Eigen::Index p = f.cols();
  if (p == 0) throw ValidationError("first stage: all instruments have zero variance");

  const double gamma = cfg.gamma.value_or(auto_gamma(n, p));
  out.gamma_used = gamma;
  out.lambda = penalty_level(n, p, data.k_e(), cfg.c, gamma);

  out.dhat.resize(n, data.k_d());
  for (Eigen::Index l = 0; l < data.k_e(); ++l) {
    const Vec d_l = data.d_endo.col(l);
    EquationFit eq;

    PenaltyPlan plan;
    plan.lambda = out.lambda;
    plan.c = cfg.c;
    plan.gamma = gamma;
    plan.loadings = initial_loadings(f, d_l);
    plan.stage = PenaltyPlan::Stage::initial;
    eq.loading_history.push_back(plan.loadings);

    auto solve_round = [&](const Vec* warm) {
      eq.lasso = solve_weighted_lasso(f, d_l, plan, cfg.solver, warm);
      eq.support = eq.lasso.support;
      if (cfg.method == FirstStageMethod::post_lasso) {
        PostLassoOptions po;
        po.intercept = cfg.solver.intercept;
        po.lasso_support = eq.support;
        eq.post = post_lasso(f, d_l, eq.support, po);
        eq.beta = eq.post->beta;
        eq.intercept = eq.post->intercept;
      } else {
        eq.beta = eq.lasso.beta;
        eq.intercept = eq.lasso.intercept;
      }
    };

    solve_round(nullptr);
    for (int t = 1; t < cfg.max_loading_iters; ++t) {
      const Vec resid = d_l - f * eq.beta - Vec::Constant(n, eq.intercept);
      if (resid.squaredNorm() == 0.0) break;  // perfect fit; loadings degenerate
      const Vec refined = refined_loadings(f, resid);
      const double rel_change =
          ((refined - plan.loadings).array().abs() / plan.loadings.array()).maxCoeff();
      if (rel_change < cfg.loading_tol) break;  // loading fixed point reached
      plan.loadings = refined;
      plan.stage = PenaltyPlan::Stage::refined;
      plan.refine_iter = t;
      eq.loading_history.push_back(plan.loadings);
      eq.iterations = t;
      solve_round(&eq.lasso.beta);
    }

    eq.empty_selection = eq.support.empty();
    if (eq.empty_selection) {
      out.any_empty_selection = true;
      eq.fallback_index = fallback_single_instrument(f, d_l);
      // Point estimation falls back to the single best-correlated instrument:
      // the Dhat column becomes the OLS fit of d_l on it (one-instrument 2SLS).
      // Inference for this equation routes to the sup-score region.
      PostLassoOptions po;
      po.intercept = cfg.solver.intercept;
      const auto fb = post_lasso(f, d_l, {*eq.fallback_index}, po);
      eq.beta = fb.beta;
      eq.intercept = fb.intercept;
    }
    out.dhat.col(l) = f * eq.beta + Vec::Constant(n, eq.intercept);
    out.equations.push_back(std::move(eq));
  }

  if (data.k_w() > 0) out.dhat.rightCols(data.k_w()) = data.w;
  return out;
}

/// Rebuild the n x k_d optimal-instrument matrix from a fit: endogenous
/// columns are f * beta_l + intercept, trailing columns copy w verbatim.
inline Mat predict_optimal_instruments(const FirstStageFit& fit, const Dataset& data) {
  if (static_cast<Eigen::Index>(fit.equations.size()) != data.k_e())
    throw ValidationError("predict: fit and data disagree on k_e");
  Mat f(data.n(), static_cast<Eigen::Index>(fit.kept_instruments.size()));
  for (std::size_t i = 0; i < fit.kept_instruments.size(); ++i) {
    if (fit.kept_instruments[i] >= data.p())
      throw ValidationError("predict: fit and data disagree on instrument count");
    f.col(static_cast<Eigen::Index>(i)) = data.f.col(fit.kept_instruments[i]);
  }
  Mat dhat(data.n(), data.k_d());
  for (Eigen::Index l = 0; l < data.k_e(); ++l) {
    const auto& eq = fit.equations[static_cast<std::size_t>(l)];
    if (eq.beta.size() != f.cols())
      throw ValidationError("predict: coefficient length mismatch");
    dhat.col(l) = f * eq.beta + Vec::Constant(data.n(), eq.intercept);
  }
  if (data.k_w() > 0) dhat.rightCols(data.k_w()) = data.w;
  return dhat;
}

}  // namespace sparseiv
