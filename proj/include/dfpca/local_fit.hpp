#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>

namespace dfpca {

/// Outcome of a weighted local least-squares solve.
enum class FitStatus { Ok, LocalConstant, Empty };

namespace detail {

/// Ridge guard added to local normal equations: eps = kRidgeScale * trace(A).
inline constexpr double kRidgeScale = 1e-10;

/// Threshold on the ridged LDLT pivot ratio below which a window is treated
/// as rank-deficient and the fit falls back to the local constant.
inline constexpr double kSingularRcond = 1e-8;

/// Number of window-enlargement retries for empty kernel windows, each by
/// a factor 1.5, before a fit gives up on a node.
inline constexpr int kWindowRetries = 3;
inline constexpr double kWindowGrowth = 1.5;

/**
 * @brief Index bookkeeping for local-polynomial moment sums of order <= 2.
 *
 * For a p-variate local linear fit the normal matrix needs the moments
 * S_r = sum w * u^r over multi-indices |r| <= 2 and the right-hand side needs
 * |r| <= 1. Moments are enumerated: 0 -> constant, 1..p -> e_k, then the
 * quadratic pairs (k <= l) in row-major order.
 */
struct MomentBasis {
  std::size_t p = 0;

  explicit MomentBasis(std::size_t vars) : p(vars) {}

  std::size_t count() const { return 1 + p + p * (p + 1) / 2; }
  std::size_t count_linear() const { return 1 + p; }

  std::size_t linear(std::size_t k) const { return 1 + k; }
  std::size_t quadratic(std::size_t k, std::size_t l) const {
    // k <= l assumed; offset of row k in the upper-triangular enumeration.
    return 1 + p + k * p - k * (k - 1) / 2 + (l - k);
  }
};

struct LocalSolve {
  double b0 = 0.0;
  double inv00 = 0.0;  // first diagonal entry of (A + eps I)^{-1}
  FitStatus status = FitStatus::Empty;
};

/**
 * @brief Solves the ridged local normal equations A b = rhs for the level b0.
 *
 * A ridge eps is always added to the diagonal (fixed_ridge if >= 0, otherwise
 * kRidgeScale * trace). Rank-deficient windows (ridged pivot ratio below
 * kSingularRcond, or a non-finite solution) fall back to the local constant
 * rhs0 / A00; windows with no mass report Empty.
 */
inline LocalSolve solve_local(Eigen::MatrixXd A, Eigen::VectorXd rhs, double fixed_ridge = -1.0,
                              bool want_inv00 = false) {
  LocalSolve out;
  const double s0 = A(0, 0);
  const double t0 = rhs(0);
  if (!(s0 > 0.0)) return out;

  const double eps = fixed_ridge >= 0.0 ? fixed_ridge : kRidgeScale * A.trace();
  A.diagonal().array() += eps;

  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  bool ok = ldlt.info() == Eigen::Success;
  if (ok) {
    const auto d = ldlt.vectorD();
    const double dmax = d.cwiseAbs().maxCoeff();
    const double dmin = d.cwiseAbs().minCoeff();
    ok = dmax > 0.0 && d.minCoeff() > 0.0 && dmin > kSingularRcond * dmax;
  }
  if (ok) {
    const Eigen::VectorXd b = ldlt.solve(rhs);
    if (b.allFinite()) {
      out.b0 = b(0);
      out.status = FitStatus::Ok;
      if (want_inv00) {
        Eigen::VectorXd e1 = Eigen::VectorXd::Zero(A.rows());
        e1(0) = 1.0;
        out.inv00 = ldlt.solve(e1)(0);
      }
      return out;
    }
  }

  // Local-constant fallback; its leave-one-out influence is w / S0.
  out.b0 = t0 / s0;
  out.status = FitStatus::LocalConstant;
  if (want_inv00) out.inv00 = 1.0 / s0;
  return out;
}

/// Accumulates one weighted point into p-variate moment sums laid out per
/// MomentBasis. `u` is the (target - point) covariate.
inline void accumulate_moments(const MomentBasis& basis, const double* u, double w, double wy,
                               double* S, double* T) {
  S[0] += w;
  T[0] += wy;
  for (std::size_t k = 0; k < basis.p; ++k) {
    const double wu = w * u[k];
    S[basis.linear(k)] += wu;
    T[basis.linear(k)] += wy * u[k];
    for (std::size_t l = k; l < basis.p; ++l) S[basis.quadratic(k, l)] += wu * u[l];
  }
}

/// Assembles the local-linear normal matrix and rhs from moment values laid
/// out per MomentBasis (S: count() values, T: count_linear() values).
inline void assemble_normal_equations(const MomentBasis& basis, const double* S, const double* T,
                                      Eigen::MatrixXd& A, Eigen::VectorXd& rhs) {
  const std::size_t p = basis.p;
  A.resize(static_cast<Eigen::Index>(p + 1), static_cast<Eigen::Index>(p + 1));
  rhs.resize(static_cast<Eigen::Index>(p + 1));
  A(0, 0) = S[0];
  rhs(0) = T[0];
  for (std::size_t k = 0; k < p; ++k) {
    const double sk = S[basis.linear(k)];
    A(0, static_cast<Eigen::Index>(k + 1)) = sk;
    A(static_cast<Eigen::Index>(k + 1), 0) = sk;
    rhs(static_cast<Eigen::Index>(k + 1)) = T[basis.linear(k)];
    for (std::size_t l = k; l < p; ++l) {
      const double skl = S[basis.quadratic(k, l)];
      A(static_cast<Eigen::Index>(k + 1), static_cast<Eigen::Index>(l + 1)) = skl;
      A(static_cast<Eigen::Index>(l + 1), static_cast<Eigen::Index>(k + 1)) = skl;
    }
  }
}

}  // namespace detail
}  // namespace dfpca
