// Acceptance suite: runs every acceptance criterion end to end and prints
// one PASS/FAIL line per criterion. Exit code is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "sparseiv.hpp"

using namespace sparseiv;

namespace {

int g_failures = 0;

void report(int id, const std::string& label, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", id, label.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Tail-stable high-precision inverse-normal oracle (bisection on erfc).
double quantile_oracle(double p) {
  const bool upper = p > 0.5;
  const double tail = upper ? 1.0 - p : p;
  double lo = 0.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (0.5 * std::erfc(mid / std::sqrt(2.0)) > tail ? lo : hi) = mid;
  }
  return upper ? 0.5 * (lo + hi) : -0.5 * (lo + hi);
}

Mat gaussian_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  }
  return m;
}

// Independent KKT checker on raw moments.
double kkt_violation(const Mat& f, const Vec& d, const PenaltyPlan& plan,
                     const LassoFit& fit) {
  const double n = static_cast<double>(f.rows());
  const Vec r = d - f * fit.beta - Vec::Constant(f.rows(), fit.intercept);
  double worst = 0.0;
  for (Eigen::Index j = 0; j < f.cols(); ++j) {
    const double g = 2.0 * f.col(j).dot(r) / n;
    const double lim = plan.lambda * plan.loadings[j] / n;
    const double viol = fit.beta[j] != 0.0
                            ? std::abs(g - (fit.beta[j] > 0.0 ? lim : -lim))
                            : std::max(0.0, std::abs(g) - lim);
    worst = std::max(worst, viol);
  }
  return worst;
}

// ---------------------------------------------------------------------------

void criterion_1() {
  const double t0 = now_seconds();
  Rng rng(1001);
  int checked = 0;
  double worst_ratio = 0.0;
  bool ok = true;
  for (int inst = 0; inst < 200; ++inst) {
    const Eigen::Index n = 20 + static_cast<Eigen::Index>(rng.below(181));   // [20, 200]
    const Eigen::Index p = 10 + static_cast<Eigen::Index>(rng.below(491));   // [10, 500]
    Mat f(n, p);
    const bool correlated = rng.uniform() < 0.5;
    for (Eigen::Index i = 0; i < n; ++i) {
      double prev = rng.normal();
      f(i, 0) = prev;
      for (Eigen::Index j = 1; j < p; ++j) {
        const double e = rng.normal();
        prev = correlated ? 0.5 * prev + std::sqrt(0.75) * e : e;
        f(i, j) = prev;
      }
    }
    // random column scales
    for (Eigen::Index j = 0; j < p; ++j) f.col(j) *= std::pow(10.0, -1.0 + 2.0 * rng.uniform());
    Vec d(n);
    const int s = 1 + static_cast<int>(rng.below(5));
    for (Eigen::Index i = 0; i < n; ++i) {
      double mu = 0.0;
      for (int k = 0; k < s; ++k) mu += f(i, k % p) * (k % 2 == 0 ? 1.0 : -0.7);
      d[i] = mu + rng.normal();
    }
    PenaltyPlan plan;
    plan.lambda = penalty_level(n, p, 1, 1.1, auto_gamma(n, p));
    plan.loadings = initial_loadings(f, d);
    LassoFit fit = solve_weighted_lasso(f, d, plan);
    if (inst % 2 == 0) {  // also certify a refined-loading solve
      const Vec resid = d - f * fit.beta - Vec::Constant(n, fit.intercept);
      if (resid.squaredNorm() > 0.0) {
        plan.loadings = refined_loadings(f, resid);
        fit = solve_weighted_lasso(f, d, plan, {}, &fit.beta);
      }
    }
    const double gap = kkt_violation(f, d, plan, fit);
    const double allow =
        1e-7 * (plan.lambda / static_cast<double>(n)) * plan.loadings.maxCoeff();
    worst_ratio = std::max(worst_ratio, gap / allow);
    if (gap > allow) ok = false;
    ++checked;
  }
  const double elapsed = now_seconds() - t0;
  if (elapsed >= 60.0) ok = false;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d instances, worst gap %.2e of budget, %.1f s",
                checked, worst_ratio, elapsed);
  report(1, "KKT certification on random instances", ok, buf);
}

void criterion_2() {
  Rng rng(1002);
  bool ok_a = true;
  for (int inst = 0; inst < 50; ++inst) {
    const Eigen::Index p = 4 + static_cast<Eigen::Index>(rng.below(12));
    const Eigen::Index n = 3 * p + static_cast<Eigen::Index>(rng.below(100));
    const Mat f = gaussian_matrix(rng, n, p);
    Vec d(n);
    for (Eigen::Index i = 0; i < n; ++i) d[i] = f(i, 0) - 0.4 * f(i, p - 1) + rng.normal();
    PenaltyPlan plan;
    plan.lambda = 0.0;
    plan.loadings = Vec::Ones(p);
    const LassoFit fit = solve_weighted_lasso(f, d, plan);
    Mat x(n, p + 1);
    x.leftCols(p) = f;
    x.col(p).setOnes();
    const Vec ols = (x.transpose() * x).ldlt().solve(x.transpose() * d);
    if ((fit.beta - ols.head(p)).cwiseAbs().maxCoeff() > 1e-8) ok_a = false;
  }

  // (b) orthonormal design: Sylvester Hadamard 16x16 via the sign rule
  // H(i,j) = (-1)^{popcount(i & j)}; columns 1..8 are zero-mean with
  // E_n[f_j^2] = 1 and orthogonal.
  bool ok_b = true;
  {
    const int n = 16, p = 8;
    Mat h(16, 16);
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        h(i, j) = (__builtin_popcount(i & j) % 2 == 0) ? 1.0 : -1.0;
      }
    }
    Mat f(n, p);
    for (int j = 0; j < p; ++j) f.col(j) = h.col(j + 1);
    Vec bstar(p);
    bstar << 0.9, -0.6, 0.45, -0.3, 0.2, -0.12, 0.06, 0.0;
    const Vec d = f * bstar;
    for (int k = 0; k < 20; ++k) {
      const double thr = 0.05 * k;  // lambda / (2n)
      PenaltyPlan plan;
      plan.lambda = thr * 2.0 * n;
      plan.loadings = Vec::Ones(p);
      const LassoFit fit = solve_weighted_lasso(f, d, plan);
      for (int j = 0; j < p; ++j) {
        const double expect =
            std::abs(bstar[j]) > thr ? (bstar[j] > 0 ? bstar[j] - thr : bstar[j] + thr) : 0.0;
        if (std::abs(fit.beta[j] - expect) > 1e-8) ok_b = false;
      }
    }
  }

  // (c) post-lasso vs an independent normal-equations solve on the support
  bool ok_c = true;
  for (int inst = 0; inst < 30; ++inst) {
    const Eigen::Index n = 60 + static_cast<Eigen::Index>(rng.below(100));
    const Eigen::Index p = 12;
    const Mat f = gaussian_matrix(rng, n, p);
    Vec d(n);
    for (Eigen::Index i = 0; i < n; ++i) d[i] = 1.3 * f(i, 2) - f(i, 7) + rng.normal();
    std::vector<int> support;
    for (Eigen::Index j = 0; j < p; ++j) {
      if (rng.uniform() < 0.4) support.push_back(static_cast<int>(j));
    }
    const PostLassoFit fit = post_lasso(f, d, support);
    const Eigen::Index k = static_cast<Eigen::Index>(support.size());
    Mat x(n, k + 1);
    for (Eigen::Index i = 0; i < k; ++i) x.col(i) = f.col(support[static_cast<std::size_t>(i)]);
    x.col(k).setOnes();
    const Vec coef = (x.transpose() * x).ldlt().solve(x.transpose() * d);
    for (Eigen::Index i = 0; i < k; ++i) {
      if (std::abs(fit.beta[support[static_cast<std::size_t>(i)]] - coef[i]) > 1e-9) ok_c = false;
    }
    if (std::abs(fit.intercept - coef[k]) > 1e-9) ok_c = false;
  }

  char buf[120];
  std::snprintf(buf, sizeof(buf), "a:%s b:%s c:%s", ok_a ? "ok" : "FAIL",
                ok_b ? "ok" : "FAIL", ok_c ? "ok" : "FAIL");
  report(2, "oracle equivalences (OLS limit, soft threshold, post-lasso refit)",
         ok_a && ok_b && ok_c, buf);
}

void criterion_3() {
  const double gamma = 0.1 / std::log(100.0);
  const double lam = penalty_level(100, 100, 1, 1.1, gamma);
  const double lam_oracle = 2.0 * 1.1 * 10.0 * quantile_oracle(1.0 - gamma / 200.0);
  const double cv = critical_value(100, 100, 0.05, 1.1);
  const double cv_oracle = 1.1 * 10.0 * quantile_oracle(1.0 - 0.05 / 200.0);
  const bool ok = std::abs(lam - lam_oracle) <= 0.1 && std::abs(lam - 81.4) <= 0.1 &&
                  std::abs(cv - cv_oracle) <= 0.1;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "penalty %.4f (oracle %.4f), critical %.4f (oracle %.4f)",
                lam, lam_oracle, cv, cv_oracle);
  report(3, "penalty level and critical value against the inverse-normal oracle", ok, buf);
}

void criterion_4() {
  Rng rng(1004);
  bool ok = true;
  for (int inst = 0; inst < 50; ++inst) {
    const Eigen::Index n = 80, p = 15;
    Dataset data;
    data.f = gaussian_matrix(rng, n, p);
    data.d_endo.resize(n, 1);
    data.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = rng.normal();
      data.d_endo(i, 0) = 1.4 * data.f(i, 0) - 0.9 * data.f(i, 4) + v;
      data.y[i] = data.d_endo(i, 0) + 0.5 * v + rng.normal();
    }
    data.w = Mat(n, 0);

    const FirstStageFit fs1 = fit_first_stage(data);
    const Vec alpha1 = iv_point_estimate(fs1.dhat, data.d(), data.y);
    const auto prob1 = SupScoreProblem::build(data, 1.1, 0.05);
    Vec a(1);
    a << 0.5;
    const double sup1 = sup_score(prob1, a);

    Dataset scaled = data;
    for (Eigen::Index j = 0; j < p; ++j) {
      scaled.f.col(j) *= std::pow(10.0, -3.0 + 6.0 * rng.uniform());
    }
    const FirstStageFit fs2 = fit_first_stage(scaled);
    const Vec alpha2 = iv_point_estimate(fs2.dhat, scaled.d(), scaled.y);
    const auto prob2 = SupScoreProblem::build(scaled, 1.1, 0.05);
    const double sup2 = sup_score(prob2, a);

    if (fs1.equations[0].support != fs2.equations[0].support) ok = false;
    if ((fs1.dhat - fs2.dhat).cwiseAbs().maxCoeff() > 1e-8) ok = false;
    if (std::abs(alpha1[0] - alpha2[0]) > 1e-8 * (1.0 + std::abs(alpha1[0]))) ok = false;
    if (std::abs(sup1 - sup2) > 1e-8 * (1.0 + sup1)) ok = false;
  }
  report(4, "scale equivariance of fits, supports, alpha and the sup score", ok,
         "50 instances, kappa in [1e-3, 1e3]");
}

void criterion_5() {
  Rng rng(1005);
  bool ok = true;
  int boundary_flagged = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const Eigen::Index n = 50, p = 20;
    Dataset data;
    data.f = gaussian_matrix(rng, n, p);
    data.d_endo.resize(n, 1);
    data.y.resize(n);
    const double signal = inst % 2 == 0 ? 1.5 : 0.5;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = 0.6 * rng.normal();
      data.d_endo(i, 0) = signal * data.f(i, 0) + 0.4 * data.f(i, 1) + v;
      data.y[i] = data.d_endo(i, 0) + 0.5 * v + rng.normal();
    }
    data.w = Mat(n, 0);
    const auto prob = SupScoreProblem::build(data, 1.1, 0.05);
    const auto grid = make_grid_1d(-4.0, 6.0, 0.1);  // 101 points
    if (grid.size() != 101) ok = false;
    const auto direct = invert_region(prob, grid);
    const auto lasso = inverse_lasso_region(prob, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (direct.points[i].near_boundary) {
        ++boundary_flagged;
        continue;  // the carve-out: flagged points may disagree
      }
      if (direct.points[i].accepted != lasso.points[i].accepted) ok = false;
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "20 instances x 101 points, %d boundary points flagged",
                boundary_flagged);
  report(5, "sup-score and inverse-lasso regions coincide", ok, buf);
}

DgpSpec table1_spec(Eigen::Index n) {
  DgpSpec spec;
  spec.n = n;
  spec.p = 100;
  spec.design = DgpSpec::Design::cutoff;
  spec.s = 5;
  spec.mu2 = 180.0;
  spec.corr_ev = 0.6;
  return spec;
}

void criterion_6() {
  const double t0 = now_seconds();
  const auto ests = make_estimators({"post_lasso", "sup_score"});
  McOptions opts;

  const auto t250 = run_replications(table1_spec(250), ests, 500, 20250, opts);
  const auto t100 = run_replications(table1_spec(100), ests, 500, 20100, opts);
  const double rp250 = t250.rows[0].rp05;
  const double rp100 = t100.rows[0].rp05;
  const double sup250 = t250.rows[1].rp05;
  const double sup100 = t100.rows[1].rp05;
  const double elapsed = now_seconds() - t0;

  const bool ok = rp250 >= 0.02 && rp250 <= 0.10 && rp100 >= 0.02 && rp100 <= 0.12 &&
                  sup250 <= 0.07 && sup100 <= 0.07 && elapsed < 900.0;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "post-lasso rp05 n250=%.3f [.02,.10], n100=%.3f [.02,.12]; sup-score "
                "%.3f/%.3f <= .07; %.0f s",
                rp250, rp100, sup250, sup100, elapsed);
  report(6, "Monte Carlo size, strong cut-off design", ok, buf);
}

void criterion_7() {
  DgpSpec spec;
  spec.n = 100;
  spec.p = 100;
  spec.design = DgpSpec::Design::cutoff;
  spec.s = 50;
  spec.mu2 = 30.0;
  spec.corr_ev = 0.6;
  const auto ests = make_estimators({"post_lasso", "sup_score"});
  const auto table = run_replications(spec, ests, 500, 20330, {});
  const int n0 = table.rows[0].n0;
  const double coverage = 1.0 - table.rows[1].rp05;
  const bool ok = n0 > 0 && coverage >= 0.93;
  char buf[120];
  std::snprintf(buf, sizeof(buf), "N(0)=%d > 0, sup-score coverage %.3f >= 0.93", n0,
                coverage);
  report(7, "weak design: fallback exercised, sup-score coverage", ok, buf);
}

void criterion_8() {
  const DgpSpec spec = table1_spec(250);
  const DgpSampler sampler(spec);
  const double crit = chi2_quantile(0.95, 1);
  int reject_null = 0, tested_null = 0;
  int reject_alt = 0, tested_alt = 0;
  for (int r = 0; r < 500; ++r) {
    const std::uint64_t seed = derive_seed(20880, static_cast<std::uint64_t>(r));
    SimDraw draw = sampler.draw(seed);
    for (int variant = 0; variant < 2; ++variant) {
      Dataset data = draw.data;
      if (variant == 1) data.y += 0.5 * data.f.col(0);  // invalidates instrument 1
      try {
        const FirstStageFit fs = fit_first_stage(data);
        const Vec alpha = iv_point_estimate(fs.dhat, data.d(), data.y);
        const Mat a = data.f.leftCols(1);
        const auto st = spec_test(a, data.d(), data.y, fs.dhat, Mat::Identity(1, 1), alpha);
        if (variant == 0) {
          ++tested_null;
          if (st.J > crit) ++reject_null;
        } else {
          ++tested_alt;
          if (st.J > crit) ++reject_alt;
        }
      } catch (const std::exception&) {
        // degenerate replication: excluded with a count via the denominators
      }
    }
  }
  const double size = static_cast<double>(reject_null) / std::max(1, tested_null);
  const double power = static_cast<double>(reject_alt) / std::max(1, tested_alt);
  const bool ok = tested_null >= 450 && size >= 0.02 && size <= 0.10 && power >= 0.5;
  char buf[140];
  std::snprintf(buf, sizeof(buf), "size %.3f in [.02,.10] (%d reps), power %.3f >= 0.5",
                size, tested_null, power);
  report(8, "specification test size and power", ok, buf);
}

void criterion_9() {
  const auto ests = make_estimators({"split_sample"});
  const auto table = run_replications(table1_spec(250), ests, 500, 20990, {});
  const auto& row = table.rows[0];
  const bool ok = row.rp05 >= 0.02 && row.rp05 <= 0.12 &&
                  std::abs(row.med_bias) <= row.mad && row.failures == 0;
  char buf[140];
  std::snprintf(buf, sizeof(buf), "rp05 %.3f in [.02,.12], |med bias| %.4f <= MAD %.4f",
                row.rp05, std::abs(row.med_bias), row.mad);
  report(9, "split-sample estimator size and bias", ok, buf);
}

void criterion_10() {
  const auto re_id = restricted_eigenvalue(Mat(Mat::Identity(6, 6)), 2, 1.0, ComputeMode::exact);
  const bool ok_id = re_id.kappa == 1.0;

  bool ok_se = true;
  for (int m = 1; m <= 4; ++m) {
    const auto se = sparse_eigenvalues(Mat(Mat::Identity(4, 4)), m, ComputeMode::exact);
    if (se.min != 1.0 || se.max != 1.0) ok_se = false;
  }

  Mat m3(3, 3);
  m3 << 1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0;
  const auto re3 = restricted_eigenvalue(m3, 1, 1.0, ComputeMode::exact);
  double grid_best = 1e300;
  for (int t = 0; t < 3; ++t) {
    for (double sign : {1.0, -1.0}) {
      const int a = (t + 1) % 3, b = (t + 2) % 3;
      for (double x = -1.0; x <= 1.0 + 1e-12; x += 0.005) {
        const double rem = 1.0 - std::abs(x);
        for (double y = -rem; y <= rem + 1e-12; y += 0.005) {
          Vec d = Vec::Zero(3);
          d[t] = sign;
          d[a] = x;
          d[b] = y;
          grid_best = std::min(grid_best, d.dot(m3 * d));
        }
      }
    }
  }
  const double kappa_grid = std::sqrt(grid_best);
  const bool ok_grid = std::abs(re3.kappa - kappa_grid) <= 1e-3;

  char buf[140];
  std::snprintf(buf, sizeof(buf), "kappa(I)=%.17g, sparse=(1,1), fixture %.6f vs grid %.6f",
                re_id.kappa, re3.kappa, kappa_grid);
  report(10, "diagnostics fixtures (identity and p=3 oracle)", ok_id && ok_se && ok_grid, buf);
}

void criterion_11() {
  const std::string dir = "/tmp/sparseiv_acceptance_" + std::to_string(::getpid());
  [[maybe_unused]] const int rc = std::system(("mkdir -p " + dir).c_str());
  const std::string cfg = dir + "/sim.json";
  {
    std::ofstream out(cfg);
    out << R"({"n": 100, "p": 60, "design": "cutoff", "s": 5, "mu2": 180,
               "estimators": ["post_lasso", "post_lasso_f", "sup_score", "split_sample"]})";
  }
  auto run = [&](int threads, const std::string& tag) {
    const std::string out = dir + "/table_" + tag + ".csv";
    const std::string cmd = std::string(SPARSEIV_CLI_PATH) + " simulate --config " + cfg +
                            " --reps 40 --seed 42 --threads " + std::to_string(threads) +
                            " --out " + out + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) return std::string();
    std::ifstream in(out, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string t1 = run(1, "t1");
  const std::string t2 = run(2, "t2");
  const std::string t8 = run(8, "t8");
  const bool ok = !t1.empty() && t1 == t2 && t1 == t8;
  report(11, "simulate CSV byte-identical across 1, 2, 8 threads", ok,
         ok ? "identical bytes" : "outputs differ or a run failed");
}

void criterion_12() {
  const DgpSpec spec = table1_spec(250);
  const auto ests = make_estimators({"post_lasso_f", "sup_score"});
  McOptions opts;

  // null run pins the median reported standard error of the t-based test
  const auto null_records = run_raw(spec, ests, 500, 21120, opts);
  std::vector<double> ses;
  for (const auto& rec : null_records) {
    if (!rec[0].failed && std::isfinite(rec[0].se)) ses.push_back(rec[0].se);
  }
  const double se_med = median(ses);
  const double lo = 1.0 - 10.0 * se_med, hi = 1.0 + 10.0 * se_med;

  const auto curve = size_adjusted_power(spec, ests, {lo, 1.0, hi}, 500, 21120, opts);
  auto power_of = [&](const std::string& name, double beta) {
    for (const auto& pt : curve.points) {
      if (pt.estimator == name && pt.beta_alt == beta) return pt.power;
    }
    return -1.0;
  };
  const double plf_lo = power_of("post_lasso_f", lo);
  const double plf_hi = power_of("post_lasso_f", hi);
  const double sup_lo = power_of("sup_score", lo);
  const double sup_hi = power_of("sup_score", hi);
  const double plf_null = power_of("post_lasso_f", 1.0);
  // Across the extreme grid points the sup-score test must lose power
  // strictly and never dominate. At n=250 both tests can saturate at exactly
  // 1.000 on one side with R=500 draws, so the strict deficit is assessed
  // over the two extremes jointly.
  const bool ok = plf_lo >= sup_lo && plf_hi >= sup_hi &&
                  plf_lo + plf_hi > sup_lo + sup_hi &&
                  std::abs(plf_null - 0.05) <= 0.001;
  char buf[220];
  std::snprintf(buf, sizeof(buf),
                "beta in {%.3f, %.3f}: post-lasso-F power (%.3f, %.3f) vs sup-score "
                "(%.3f, %.3f); size at null %.3f",
                lo, hi, plf_lo, plf_hi, sup_lo, sup_hi, plf_null);
  report(12, "size-adjusted power: sup-score loses power at +-10 SE", ok, buf);
}

}  // namespace

int main() {
  const double t0 = now_seconds();
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_9();
  criterion_10();
  criterion_11();
  criterion_12();
  std::printf("acceptance: %d of 12 criteria passed in %.0f s\n", 12 - g_failures,
              now_seconds() - t0);
  return g_failures;
}
