#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "sparseiv/data.hpp"
#include "sparseiv/errors.hpp"
#include "sparseiv/random.hpp"

namespace sparseiv {

enum class ComputeMode { exact, sampled };

namespace detail {

inline double enumeration_budget_re(Eigen::Index p, int s) {
  double total = 0.0;
  double binom = static_cast<double>(p);  // C(p,1)
  double pow2 = 2.0;
  for (int t = 1; t <= s; ++t) {
    total += binom * pow2;
    binom *= static_cast<double>(p - t) / static_cast<double>(t + 1);
    pow2 *= 2.0;
    if (total > 1e18) break;
  }
  return total;
}

inline double binom(Eigen::Index p, int m) {
  double b = 1.0;
  for (int t = 0; t < m; ++t) b *= static_cast<double>(p - t) / static_cast<double>(t + 1);
  return b;
}

/// Euclidean projection onto the simplex {u >= 0, sum u = 1}.
inline Vec project_simplex(Vec v) {
  const Eigen::Index n = v.size();
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0, theta = 0.0;
  int rho = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    css += u[static_cast<std::size_t>(i)];
    const double t = (css - 1.0) / static_cast<double>(i + 1);
    if (u[static_cast<std::size_t>(i)] - t > 0.0) {
      rho = static_cast<int>(i + 1);
      theta = t;
    }
  }
  (void)rho;
  for (Eigen::Index i = 0; i < n; ++i) v[i] = std::max(0.0, v[i] - theta);
  return v;
}

/// Euclidean projection onto the l1 ball of radius c.
inline Vec project_l1_ball(Vec v, double c) {
  if (v.size() == 0 || v.lpNorm<1>() <= c) return v;
  if (c <= 0.0) return Vec::Zero(v.size());
  Vec a = v.cwiseAbs();
  const Vec u = project_simplex(a / c) * c;  // projection of |v| onto the scaled simplex
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    v[i] = (v[i] >= 0.0 ? 1.0 : -1.0) * u[i];
  }
  return v;
}

// Enumerate all subsets of {0..p-1} of size exactly t.
template <typename F>
inline void for_each_subset(Eigen::Index p, int t, F&& body) {
  std::vector<int> idx(static_cast<std::size_t>(t));
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    body(idx);
    int i = t - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == static_cast<int>(p) - t + i) --i;
    if (i < 0) break;
    ++idx[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < t; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
}

}  // namespace detail

struct RestrictedEigenvalue {
  double kappa = 0.0;  // kappa_C
  Vec delta;           // certifying direction, ||delta_T||_1 == 1
  bool exact = true;   // sampled values are upper bounds only
};

namespace detail {

/// min delta' M delta over sign'*delta_T = 1, sign_i delta_{T,i} >= 0,
/// ||delta_{Tc}||_1 <= C, by projected gradient plus an active-face polish.
inline std::pair<double, Vec> re_subproblem(const Mat& m, const std::vector<int>& T,
                                            const std::vector<double>& sign, double C,
                                            double lips) {
  const Eigen::Index p = m.rows();
  const int t = static_cast<int>(T.size());
  std::vector<char> inT(static_cast<std::size_t>(p), 0);
  for (int j : T) inT[static_cast<std::size_t>(j)] = 1;
  std::vector<int> Tc;
  for (Eigen::Index j = 0; j < p; ++j) {
    if (!inT[static_cast<std::size_t>(j)]) Tc.push_back(static_cast<int>(j));
  }

  Vec delta = Vec::Zero(p);
  for (int i = 0; i < t; ++i) delta[T[static_cast<std::size_t>(i)]] = sign[static_cast<std::size_t>(i)] / t;

  const double step = 0.5 / std::max(lips, 1e-300);
  auto project = [&](Vec v) {
    Vec ut(t);
    for (int i = 0; i < t; ++i) ut[i] = sign[static_cast<std::size_t>(i)] * v[T[static_cast<std::size_t>(i)]];
    ut = project_simplex(ut);
    Vec vc(static_cast<Eigen::Index>(Tc.size()));
    for (std::size_t i = 0; i < Tc.size(); ++i) vc[static_cast<Eigen::Index>(i)] = v[Tc[i]];
    vc = project_l1_ball(vc, C);
    Vec out = Vec::Zero(p);
    for (int i = 0; i < t; ++i) out[T[static_cast<std::size_t>(i)]] = sign[static_cast<std::size_t>(i)] * ut[i];
    for (std::size_t i = 0; i < Tc.size(); ++i) out[Tc[i]] = vc[static_cast<Eigen::Index>(i)];
    return out;
  };

  double prev = delta.dot(m * delta);
  for (int it = 0; it < 4000; ++it) {
    delta = project(delta - step * 2.0 * (m * delta));
    const double val = delta.dot(m * delta);
    if (it > 10 && std::abs(prev - val) <= 1e-12 * std::max(1.0, std::abs(val))) break;
    prev = val;
  }
  double best = delta.dot(m * delta);

  // Active-face polish: equality-constrained QP on the face identified by
  // the projected-gradient solution.
  std::vector<int> free_idx;
  std::vector<double> a1;  // sum-to-one constraint coefficients on free coords
  for (int i = 0; i < t; ++i) {
    const int j = T[static_cast<std::size_t>(i)];
    if (sign[static_cast<std::size_t>(i)] * delta[j] > 1e-12) {
      free_idx.push_back(j);
      a1.push_back(sign[static_cast<std::size_t>(i)]);
    }
  }
  const std::size_t t_free = free_idx.size();
  double l1c = 0.0;
  std::vector<int> free_c;
  for (int j : Tc) {
    l1c += std::abs(delta[j]);
    if (std::abs(delta[j]) > 1e-12) free_c.push_back(j);
  }
  const bool on_ball = l1c >= C * (1.0 - 1e-9);
  if (t_free > 0) {
    for (int j : free_c) {
      free_idx.push_back(j);
      a1.push_back(0.0);
    }
    const Eigen::Index nf = static_cast<Eigen::Index>(free_idx.size());
    Mat mf(nf, nf);
    for (Eigen::Index r = 0; r < nf; ++r) {
      for (Eigen::Index cix = 0; cix < nf; ++cix) {
        mf(r, cix) = m(free_idx[static_cast<std::size_t>(r)], free_idx[static_cast<std::size_t>(cix)]);
      }
    }
    const int ncon = on_ball && !free_c.empty() ? 2 : 1;
    Mat A = Mat::Zero(ncon, nf);
    Vec b(ncon);
    for (Eigen::Index i = 0; i < nf; ++i) A(0, i) = a1[static_cast<std::size_t>(i)];
    b[0] = 1.0;
    if (ncon == 2) {
      for (Eigen::Index i = 0; i < nf; ++i) {
        const int j = free_idx[static_cast<std::size_t>(i)];
        if (!inT[static_cast<std::size_t>(j)]) A(1, i) = delta[j] >= 0.0 ? 1.0 : -1.0;
      }
      b[1] = C;
    }
    // KKT system [2M A'; A 0] [x; mu] = [0; b]
    Mat kkt = Mat::Zero(nf + ncon, nf + ncon);
    kkt.topLeftCorner(nf, nf) = 2.0 * mf;
    kkt.topRightCorner(nf, ncon) = A.transpose();
    kkt.bottomLeftCorner(ncon, nf) = A;
    Vec rhs = Vec::Zero(nf + ncon);
    rhs.tail(ncon) = b;
    Eigen::FullPivLU<Mat> lu(kkt);
    if (lu.isInvertible()) {
      const Vec sol = lu.solve(rhs);
      Vec cand = Vec::Zero(p);
      bool feasible = true;
      for (Eigen::Index i = 0; i < nf; ++i) cand[free_idx[static_cast<std::size_t>(i)]] = sol[i];
      for (int i = 0; i < t; ++i) {
        const int j = T[static_cast<std::size_t>(i)];
        if (sign[static_cast<std::size_t>(i)] * cand[j] < -1e-12) feasible = false;
      }
      double sum1 = 0.0, sumc = 0.0;
      for (int i = 0; i < t; ++i) sum1 += sign[static_cast<std::size_t>(i)] * cand[T[static_cast<std::size_t>(i)]];
      for (int j : Tc) sumc += std::abs(cand[j]);
      if (std::abs(sum1 - 1.0) > 1e-9 || sumc > C * (1.0 + 1e-9)) feasible = false;
      if (feasible) {
        const double val = cand.dot(m * cand);
        if (val <= best) {
          best = val;
          delta = cand;
        }
      }
    }
  }
  return {best, delta};
}

}  // namespace detail

/// Restricted eigenvalue kappa_C of a Gram matrix:
/// kappa_C^2 = min over |T| <= s and the cone ||delta_Tc||_1 <= C ||delta_T||_1
/// of s * delta' M delta / ||delta_T||_1^2. Exact mode enumerates supports
/// and sign patterns (budget-guarded); sampled mode draws random cone
/// directions and reports an upper bound. A fixed support may be supplied.
inline RestrictedEigenvalue restricted_eigenvalue(
    const Mat& m, int s, double C, ComputeMode mode,
    std::uint64_t seed = 0,
    const std::optional<std::vector<int>>& fixed_support = std::nullopt) {
  const Eigen::Index p = m.rows();
  if (m.cols() != p) throw ValidationError("restricted_eigenvalue: M must be square");
  if (s < 1 || s > static_cast<int>(p))
    throw ValidationError("restricted_eigenvalue: need 1 <= s <= p");
  if (C < 0.0) throw ValidationError("restricted_eigenvalue: C must be nonnegative");

  RestrictedEigenvalue out;
  double best = std::numeric_limits<double>::infinity();
  Vec best_delta;

  if (mode == ComputeMode::exact) {
    if (!fixed_support.has_value() && detail::enumeration_budget_re(p, s) > 1e6) {
      throw ValidationError(
          "restricted_eigenvalue: enumeration budget exceeded; use sampled mode");
    }
    const double lips =
        2.0 * Eigen::SelfAdjointEigenSolver<Mat>(m).eigenvalues().maxCoeff();

    auto handle_support = [&](const std::vector<int>& T) {
      const int t = static_cast<int>(T.size());
      std::vector<double> sign(static_cast<std::size_t>(t), 1.0);
      const long patterns = 1L << t;
      for (long mask = 0; mask < patterns; ++mask) {
        for (int i = 0; i < t; ++i)
          sign[static_cast<std::size_t>(i)] = (mask >> i) & 1 ? -1.0 : 1.0;
        auto [val, delta] = detail::re_subproblem(m, T, sign, C, lips);
        const double obj = static_cast<double>(s) * val;
        if (obj < best) {
          best = obj;
          best_delta = delta;
        }
      }
    };

    if (fixed_support.has_value()) {
      handle_support(*fixed_support);
    } else {
      for (int t = 1; t <= s; ++t) {
        detail::for_each_subset(p, t, handle_support);
      }
    }
    out.exact = true;
  } else {
    Rng rng(seed);
    const int draws = 10000;
    for (int it = 0; it < draws; ++it) {
      std::vector<int> T;
      if (fixed_support.has_value()) {
        T = *fixed_support;
      } else {
        const auto perm = rng.permutation(static_cast<int>(p));
        T.assign(perm.begin(), perm.begin() + s);
      }
      Vec delta = Vec::Zero(p);
      double l1t = 0.0;
      for (int j : T) {
        delta[j] = rng.normal();
        l1t += std::abs(delta[j]);
      }
      if (l1t == 0.0) continue;
      for (int j : T) delta[j] /= l1t;
      // random point inside the cone slice ||delta_Tc||_1 <= C
      const double radius = C * rng.uniform();
      if (p > static_cast<Eigen::Index>(T.size()) && radius > 0.0) {
        std::vector<char> inT(static_cast<std::size_t>(p), 0);
        for (int j : T) inT[static_cast<std::size_t>(j)] = 1;
        double l1c = 0.0;
        Vec noise = Vec::Zero(p);
        for (Eigen::Index j = 0; j < p; ++j) {
          if (!inT[static_cast<std::size_t>(j)]) {
            noise[j] = rng.normal();
            l1c += std::abs(noise[j]);
          }
        }
        if (l1c > 0.0) delta += noise * (radius / l1c);
      }
      const double obj = static_cast<double>(s) * delta.dot(m * delta);
      if (obj < best) {
        best = obj;
        best_delta = delta;
      }
    }
    out.exact = false;
  }

  out.kappa = std::sqrt(std::max(best, 0.0));
  out.delta = best_delta;
  return out;
}

struct SparseEigenvalues {
  double min = 0.0;
  double max = 0.0;
  bool exact = true;  // sampled: min is an upper bound, max a lower bound
};

/// Extreme values of delta' M delta over m-sparse unit vectors. Exact mode
/// scans every principal submatrix of order m (budget C(p,m) <= 1e5).
inline SparseEigenvalues sparse_eigenvalues(const Mat& M, int m, ComputeMode mode,
                                            std::uint64_t seed = 0) {
  const Eigen::Index p = M.rows();
  if (M.cols() != p) throw ValidationError("sparse_eigenvalues: M must be square");
  if (m < 1) throw ValidationError("sparse_eigenvalues: m must be positive");
  if (m > static_cast<int>(p)) throw ValidationError("sparse_eigenvalues: m exceeds p");

  SparseEigenvalues out;
  out.min = std::numeric_limits<double>::infinity();
  out.max = -std::numeric_limits<double>::infinity();

  auto scan_support = [&](const std::vector<int>& idx) {
    Mat sub(m, m);
    for (int r = 0; r < m; ++r) {
      for (int c = 0; c < m; ++c) {
        sub(r, c) = M(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]);
      }
    }
    Eigen::SelfAdjointEigenSolver<Mat> eig(sub, Eigen::EigenvaluesOnly);
    out.min = std::min(out.min, eig.eigenvalues().minCoeff());
    out.max = std::max(out.max, eig.eigenvalues().maxCoeff());
  };

  if (mode == ComputeMode::exact) {
    if (detail::binom(p, m) > 1e5) {
      throw ValidationError("sparse_eigenvalues: enumeration budget exceeded; use sampled mode");
    }
    detail::for_each_subset(p, m, scan_support);
    out.exact = true;
  } else {
    Rng rng(seed);
    for (int it = 0; it < 10000; ++it) {
      const auto perm = rng.permutation(static_cast<int>(p));
      std::vector<int> idx(perm.begin(), perm.begin() + m);
      scan_support(idx);
    }
    out.exact = false;
  }
  return out;
}

/// Restricted eigenvalue together with a range of sparse-eigenvalue pairs,
/// the usual reading of a Gram matrix's selection-relevant moduli.
struct GramModuli {
  RestrictedEigenvalue restricted;
  struct SparsePair {
    int m = 0;
    double min = 0.0, max = 0.0;
    bool exact = true;
  };
  std::vector<SparsePair> sparse;
};

inline GramModuli gram_moduli(const Mat& M, int s, double C, ComputeMode mode,
                              std::uint64_t seed = 0) {
  GramModuli out;
  out.restricted = restricted_eigenvalue(M, s, C, mode, seed);
  for (int m = 1; m <= s; ++m) {
    const auto se = sparse_eigenvalues(M, m, mode, seed);
    out.sparse.push_back({m, se.min, se.max, se.exact});
  }
  return out;
}

struct WaldResult {
  double wald = 0.0;
  double f = 0.0;  // wald / dim(Z)
};

/// First-stage Wald statistic W = Pi' (Z'Z) Pi / sigma2_v and F = W / dim(Z).
inline WaldResult first_stage_wald(const Vec& pi_hat, const Mat& Z, double sigma2_v) {
  if (!(sigma2_v > 0.0)) throw ValidationError("first_stage_wald: variance must be positive");
  if (Z.cols() != pi_hat.size()) throw ValidationError("first_stage_wald: dimension mismatch");
  WaldResult out;
  const Vec zp = Z * pi_hat;
  out.wald = zp.squaredNorm() / sigma2_v;
  out.f = out.wald / static_cast<double>(Z.cols());
  return out;
}

/// Concentration parameter mu^2 = n Pi' Sigma_Z Pi / sigma2_v.
inline double concentration_parameter(const Vec& pi, const Mat& sigma_z,
                                      double sigma2_v, double n) {
  if (!(sigma2_v > 0.0))
    throw ValidationError("concentration_parameter: variance must be positive");
  if (sigma_z.rows() != pi.size() || sigma_z.cols() != pi.size())
    throw ValidationError("concentration_parameter: dimension mismatch");
  return n * pi.dot(sigma_z * pi) / sigma2_v;
}

}  // namespace sparseiv
