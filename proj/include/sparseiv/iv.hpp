#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sparseiv/data.hpp"
#include "sparseiv/errors.hpp"
#include "sparseiv/first_stage.hpp"
#include "sparseiv/math.hpp"
#include "sparseiv/random.hpp"

namespace sparseiv {

enum class VcovMode { hetero, homo };

struct IvEstimate {
  Vec alpha;   // k_d
  Mat vcov;    // k_d x k_d, variance of alpha (already divided by n)
  Vec se;      // sqrt of the vcov diagonal
  VcovMode mode = VcovMode::hetero;
  std::shared_ptr<const FirstStageFit> first_stage;  // set by the pipeline overload
};

namespace detail {

inline double condition_number(const Mat& m) {
  Eigen::JacobiSVD<Mat> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s[s.size() - 1] <= 0.0)
    return std::numeric_limits<double>::infinity();
  return s[0] / s[s.size() - 1];
}

inline Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

}  // namespace detail

/// alpha = E_n[Dhat d']^{-1} E_n[Dhat y].
inline Vec iv_point_estimate(const Mat& dhat, const Mat& d, const Vec& y) {
  const double n = static_cast<double>(dhat.rows());
  if (d.rows() != dhat.rows() || y.size() != dhat.rows() || d.cols() != dhat.cols())
    throw ValidationError("iv: dimension mismatch between Dhat, d, y");
  const Mat m = (dhat.transpose() * d) / n;
  if (detail::condition_number(m) >= 1e12)
    throw NumericError("iv: weak or collinear constructed instruments");
  const Vec rhs = (dhat.transpose() * y) / n;
  return m.fullPivLu().solve(rhs);
}

/// Heteroscedasticity-robust variance of alpha:
/// (1/n) Qhat^{-1} Omegahat Qhat^{-1} with Omegahat = E_n[eps^2 Dhat Dhat'],
/// Qhat = E_n[Dhat Dhat'].
inline Mat hetero_vcov(const Mat& dhat, const Mat& d, const Vec& y, const Vec& alpha) {
  const double n = static_cast<double>(dhat.rows());
  const Vec eps = y - d * alpha;
  const Mat q = (dhat.transpose() * dhat) / n;
  if (detail::condition_number(q) >= 1e12)
    throw NumericError("iv variance: singular Qhat");
  const Mat omega = (dhat.transpose() * eps.array().square().matrix().asDiagonal() * dhat) / n;
  const Mat qinv = q.fullPivLu().inverse();
  return detail::symmetrize(qinv * omega * qinv) / n;
}

/// Homoscedastic variance of alpha: (1/n) sigma^2 Qhat^{-1} with
/// sigma^2 = E_n[(y - d'alpha)^2].
inline Mat homo_vcov(const Mat& dhat, const Mat& d, const Vec& y, const Vec& alpha) {
  const double n = static_cast<double>(dhat.rows());
  const Vec eps = y - d * alpha;
  const double sigma2 = eps.squaredNorm() / n;
  const Mat q = (dhat.transpose() * dhat) / n;
  if (detail::condition_number(q) >= 1e12)
    throw NumericError("iv variance: singular Qhat");
  return detail::symmetrize(sigma2 * q.fullPivLu().inverse()) / n;
}

inline IvEstimate iv_estimate(const Mat& dhat, const Mat& d, const Vec& y,
                              VcovMode mode = VcovMode::hetero) {
  IvEstimate est;
  est.alpha = iv_point_estimate(dhat, d, y);
  est.mode = mode;
  est.vcov = (mode == VcovMode::hetero) ? hetero_vcov(dhat, d, y, est.alpha)
                                        : homo_vcov(dhat, d, y, est.alpha);
  est.se = est.vcov.diagonal().array().max(0.0).sqrt();
  return est;
}

/// Full pipeline: first stage, then IV on the fitted optimal instruments.
/// The returned estimate keeps a handle to its first stage.
inline IvEstimate iv_estimate(const Dataset& data, const FirstStageConfig& cfg = {},
                              VcovMode mode = VcovMode::hetero) {
  auto fs = std::make_shared<FirstStageFit>(fit_first_stage(data, cfg));
  IvEstimate est = iv_estimate(fs->dhat, data.d(), data.y, mode);
  est.first_stage = std::move(fs);
  return est;
}

struct SpecTestResult {
  double J = 0.0;
  int df = 0;
  double pvalue = 1.0;
  Vec alpha_baseline;  // the baseline IV estimate
  Mat sigma;           // Sigmahat
};

/// Hausman-style overidentification test: baseline IV with instruments A
/// against the optimal-instrument estimate alpha_hat, on the contrast
/// R(alpha_tilde - alpha_hat).
inline SpecTestResult spec_test(const Mat& A, const Mat& d, const Vec& y,
                                const Mat& dhat, const Mat& R, const Vec& alpha_hat) {
  const double n = static_cast<double>(d.rows());
  if (A.rows() != d.rows() || dhat.rows() != d.rows() || y.size() != d.rows())
    throw ValidationError("spec test: row mismatch");
  if (A.cols() < d.cols())
    throw ValidationError("spec test: baseline needs at least k_d instruments");
  if (R.cols() != d.cols()) throw ValidationError("spec test: R must be k x k_d");
  {
    Eigen::ColPivHouseholderQR<Mat> qr(R.transpose());
    if (qr.rank() < R.rows()) throw ValidationError("spec test: R is rank deficient");
  }

  const Mat aa = (A.transpose() * A) / n;
  if (detail::condition_number(aa) >= 1e12)
    throw NumericError("spec test: singular E_n[A A']");
  const Mat aa_inv = aa.fullPivLu().inverse();
  const Mat da = (d.transpose() * A) / n;  // k_d x m
  const Mat h = da * aa_inv;               // k_d x m
  const Mat hd = h * da.transpose();       // k_d x k_d
  if (detail::condition_number(hd) >= 1e12)
    throw NumericError("spec test: singular baseline design");
  const Mat mhat = hd.fullPivLu().solve(h);  // k_d x m
  const Vec ay = (A.transpose() * y) / n;

  SpecTestResult res;
  res.alpha_baseline = mhat * ay;
  res.df = static_cast<int>(R.rows());

  const Mat q = (dhat.transpose() * dhat) / n;
  if (detail::condition_number(q) >= 1e12)
    throw NumericError("spec test: singular Qhat");
  const Mat qinv = q.fullPivLu().inverse();

  const Vec eps = y - d * alpha_hat;
  // Sigmahat = E_n[eps^2 (Mhat A_i - Qhat^{-1} Dhat_i)(...)'].
  const Mat diff = A * mhat.transpose() - dhat * qinv.transpose();  // n x k_d
  Mat sigma = Mat::Zero(d.cols(), d.cols());
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    sigma.noalias() += eps[i] * eps[i] * diff.row(i).transpose() * diff.row(i);
  }
  sigma /= n;
  res.sigma = detail::symmetrize(sigma);

  const Mat rsr = R * res.sigma * R.transpose();
  const Vec contrast = R * (res.alpha_baseline - alpha_hat);
  // identical instrument spans give a zero contrast together with a zero
  // Sigmahat; the quadratic form is 0 there, not 0/0
  const double contrast_scale =
      R.cwiseAbs().maxCoeff() * (res.alpha_baseline.norm() + alpha_hat.norm() + 1.0);
  if (contrast.norm() <= 1e-10 * contrast_scale) {
    res.J = 0.0;
    res.pvalue = 1.0;
    return res;
  }
  const double sigma_scale = eps.squaredNorm() / n *
                             (diff.cwiseAbs().maxCoeff() * diff.cwiseAbs().maxCoeff() + 1e-300);
  if (detail::condition_number(rsr) >= 1e12 ||
      rsr.trace() <= 1e-14 * static_cast<double>(R.rows()) * sigma_scale)
    throw NumericError("spec test: degenerate contrast variance");
  res.J = n * contrast.dot(rsr.fullPivLu().solve(contrast));
  if (res.J < 0.0) res.J = 0.0;
  res.pvalue = chi2_sf(res.J, res.df);
  return res;
}

struct SplitSampleEstimate {
  Vec alpha_a, alpha_b, alpha_ab;
  Mat qa, qb;              // per-half moment matrices n_k E_{n_k}[Dhat Dhat']
  std::vector<int> half_a; // observation indices assigned to half a
  std::vector<int> half_b;
  Mat vcov;                // hetero vcov of alpha_ab from combined residuals
  Vec se;
  FirstStageFit fit_a, fit_b;  // first stages fitted on halves a and b
};

namespace detail {

inline Dataset subset_rows(const Dataset& data, const std::vector<int>& rows) {
  Dataset out;
  const Eigen::Index m = static_cast<Eigen::Index>(rows.size());
  out.y.resize(m);
  out.d_endo.resize(m, data.k_e());
  out.w.resize(m, data.k_w());
  out.f.resize(m, data.p());
  for (Eigen::Index i = 0; i < m; ++i) {
    const int r = rows[static_cast<std::size_t>(i)];
    out.y[i] = data.y[r];
    out.d_endo.row(i) = data.d_endo.row(r);
    if (data.k_w() > 0) out.w.row(i) = data.w.row(r);
    out.f.row(i) = data.f.row(r);
  }
  out.d_labels = data.d_labels;
  out.w_labels = data.w_labels;
  out.f_labels = data.f_labels;
  return out;
}

}  // namespace detail

/// Split-sample IV: halves by a seeded uniform permutation with
/// n_a = ceil(n/2); the first stage for each half is fit on the other half;
/// the per-half estimates are combined through their Dhat moment matrices.
inline SplitSampleEstimate split_sample_iv(const Dataset& data,
                                           const FirstStageConfig& cfg,
                                           std::uint64_t seed) {
  data.validate();
  const Eigen::Index n = data.n();
  if (n < 4) throw ValidationError("split sample: need n >= 4");

  Rng rng(seed);
  const std::vector<int> perm = rng.permutation(static_cast<int>(n));
  const Eigen::Index na = (n + 1) / 2;

  SplitSampleEstimate out;
  out.half_a.assign(perm.begin(), perm.begin() + na);
  out.half_b.assign(perm.begin() + na, perm.end());

  const Dataset da = detail::subset_rows(data, out.half_a);
  const Dataset db = detail::subset_rows(data, out.half_b);

  // Cross-fitting: coefficients from the opposite half.
  out.fit_a = fit_first_stage(da, cfg);
  out.fit_b = fit_first_stage(db, cfg);
  const Mat dhat_a = predict_optimal_instruments(out.fit_b, da);
  const Mat dhat_b = predict_optimal_instruments(out.fit_a, db);

  const Mat dmat_a = da.d(), dmat_b = db.d();
  try {
    out.alpha_a = iv_point_estimate(dhat_a, dmat_a, da.y);
  } catch (const NumericError& e) {
    throw NumericError(std::string("split sample, half a: ") + e.what());
  }
  try {
    out.alpha_b = iv_point_estimate(dhat_b, dmat_b, db.y);
  } catch (const NumericError& e) {
    throw NumericError(std::string("split sample, half b: ") + e.what());
  }

  out.qa = dhat_a.transpose() * dhat_a;  // n_a E_{n_a}[Dhat Dhat']
  out.qb = dhat_b.transpose() * dhat_b;
  const Mat total = out.qa + out.qb;
  if (detail::condition_number(total) >= 1e12)
    throw NumericError("split sample: singular combined moment matrix");
  out.alpha_ab = total.fullPivLu().solve(out.qa * out.alpha_a + out.qb * out.alpha_b);

  // Hetero vcov with combined residuals, rows kept in original order.
  Mat dhat_full(n, data.k_d());
  for (Eigen::Index i = 0; i < na; ++i) dhat_full.row(out.half_a[static_cast<std::size_t>(i)]) = dhat_a.row(i);
  for (Eigen::Index i = 0; i < n - na; ++i) dhat_full.row(out.half_b[static_cast<std::size_t>(i)]) = dhat_b.row(i);
  out.vcov = hetero_vcov(dhat_full, data.d(), data.y, out.alpha_ab);
  out.se = out.vcov.diagonal().array().max(0.0).sqrt();
  return out;
}

}  // namespace sparseiv
