#pragma once

#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sparseiv/errors.hpp"

namespace sparseiv {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// One estimation problem: outcome, regressors (endogenous first, then the
/// exogenous/control columns w which instrument themselves), and the
/// technical instruments f.
struct Dataset {
  Vec y;        // n
  Mat d_endo;   // n x k_e, endogenous regressors
  Mat w;        // n x k_w, exogenous structural regressors / controls
  Mat f;        // n x p, technical instruments

  std::vector<std::string> d_labels;  // k_e entries (reporting)
  std::vector<std::string> w_labels;  // k_w entries
  std::vector<std::string> f_labels;  // p entries

  Eigen::Index n() const { return y.size(); }
  Eigen::Index k_e() const { return d_endo.cols(); }
  Eigen::Index k_w() const { return w.cols(); }
  Eigen::Index k_d() const { return d_endo.cols() + w.cols(); }
  Eigen::Index p() const { return f.cols(); }

  /// Full regressor matrix [d_endo w].
  Mat d() const {
    Mat out(n(), k_d());
    out.leftCols(k_e()) = d_endo;
    if (k_w() > 0) out.rightCols(k_w()) = w;
    return out;
  }

  /// Indices of instrument columns with zero empirical variance.
  std::vector<int> zero_variance_instruments() const {
    std::vector<int> idx;
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
      const Vec col = f.col(j);
      const double m = col.mean();
      if ((col.array() - m).square().sum() == 0.0) idx.push_back(static_cast<int>(j));
    }
    return idx;
  }

  void validate() const {
    if (n() < 2) throw ValidationError("dataset: need at least two observations");
    if (k_e() < 1) throw ValidationError("dataset: need at least one endogenous regressor");
    if (p() < 1) throw ValidationError("dataset: need at least one instrument");
    if (d_endo.rows() != n() || f.rows() != n() || (w.size() > 0 && w.rows() != n()))
      throw ValidationError("dataset: matrices disagree on the number of rows");
    if (!y.allFinite() || !d_endo.allFinite() || !f.allFinite() ||
        (w.size() > 0 && !w.allFinite()))
      throw ValidationError("dataset: non-finite entries");
  }
};

namespace detail {

struct PivotedQr {
  Eigen::ColPivHouseholderQR<Mat> qr;
  Eigen::Index rank = 0;
};

/// Column-pivoted QR with the project-wide rank rule:
/// |R_ii| >= 1e-10 * (largest column norm).
inline PivotedQr pivoted_qr(const Mat& w) {
  PivotedQr out{Eigen::ColPivHouseholderQR<Mat>(w), 0};
  const double max_norm = w.colwise().norm().maxCoeff();
  const double tol = 1e-10 * max_norm;
  const auto& R = out.qr.matrixR();
  const Eigen::Index k = std::min(w.rows(), w.cols());
  for (Eigen::Index i = 0; i < k; ++i) {
    if (std::abs(R(i, i)) >= tol) ++out.rank;
  }
  return out;
}

}  // namespace detail

/// Residuals of each column of u after projecting out the column span of w.
/// Empty w returns u unchanged; rank-deficient w is an error naming the
/// dependent columns.
inline Mat partial_out(const Mat& u, const Mat& w) {
  if (w.size() == 0 || w.cols() == 0) return u;
  if (u.rows() != w.rows())
    throw ValidationError("partial_out: row counts of u and w differ");
  const auto f = detail::pivoted_qr(w);
  if (f.rank < w.cols()) {
    std::string cols;
    const auto perm = f.qr.colsPermutation().indices();
    for (Eigen::Index i = f.rank; i < w.cols(); ++i) {
      if (!cols.empty()) cols += ", ";
      cols += std::to_string(perm[i]);
    }
    throw ValidationError("partial_out: control matrix is rank deficient; dependent columns: " + cols);
  }
  return u - w * f.qr.solve(u);
}

inline Vec partial_out(const Vec& u, const Mat& w) {
  return partial_out(Mat(u), w).col(0);
}

struct NormalizedInstruments {
  Mat f;      // each column has E_n[f_j^2] == 1
  Vec scale;  // original column scales: input.col(j) == scale[j] * f.col(j)
};

/// Rescale instrument columns so that E_n[f_j^2] = 1 (the 1/n convention).
inline NormalizedInstruments normalize_instruments(const Mat& ftilde) {
  const double n = static_cast<double>(ftilde.rows());
  NormalizedInstruments out{ftilde, Vec(ftilde.cols())};
  for (Eigen::Index j = 0; j < ftilde.cols(); ++j) {
    const double s2 = ftilde.col(j).squaredNorm() / n;
    if (s2 <= 0.0) {
      throw ValidationError("zero variance instrument, index " + std::to_string(j));
    }
    const double s = std::sqrt(s2);
    out.scale[j] = s;
    out.f.col(j) /= s;
  }
  return out;
}

/// Residuals of (y, d_endo, f) after partialling out controls.
struct PartialledData {
  Vec y_tilde;
  Mat d_tilde;  // n x k_e
  Mat f_tilde;  // n x p
  Mat proj_y, proj_d, proj_f;  // projection coefficient caches (k_w x m)

  static PartialledData from(const Dataset& data) {
    PartialledData out;
    if (data.k_w() == 0) {
      out.y_tilde = data.y;
      out.d_tilde = data.d_endo;
      out.f_tilde = data.f;
      return out;
    }
    const auto f = detail::pivoted_qr(data.w);
    if (f.rank < data.w.cols())
      throw ValidationError("partialled data: control matrix is rank deficient");
    out.proj_y = f.qr.solve(Mat(data.y));
    out.proj_d = f.qr.solve(data.d_endo);
    out.proj_f = f.qr.solve(data.f);
    out.y_tilde = data.y - data.w * out.proj_y;
    out.d_tilde = data.d_endo - data.w * out.proj_d;
    out.f_tilde = data.f - data.w * out.proj_f;
    return out;
  }
};

}  // namespace sparseiv
