#pragma once

#include <Eigen/Dense>
#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/rng.hpp"
#include "dfpca/surface.hpp"

// Matrixization of the covariance surface, symmetric eigendecomposition with
// Riemann-sum rescaling, and the random-projection eigensolver. Masked nodes
// are excluded from matrix indexing (zero-extension: they contribute nothing
// to the eigen-integral).

namespace dfpca {

/**
 * @brief Covariance surface reshaped to an M x M operator over in-mask nodes.
 *
 * Dense when the matrix fits the memory budget; otherwise products stream
 * fixed-size row slabs read straight from the surface (the full matrix is
 * never materialized). node_of_row/row_of_node give the normative row-major,
 * last-axis-fastest bijection between grid nodes and matrix indices.
 */
struct MatrixizedCovariance {
  /// Dense path allowed when M*M doubles fit this many bytes.
  static constexpr std::size_t kDenseBudget = 2ull << 30;
  /// Row-slab size for the streaming provider.
  static constexpr std::size_t kSlabBytes = 64ull << 20;

  const SurfaceEstimate* cov = nullptr;
  Index m = 0;
  std::vector<Index> node_of_row;
  std::vector<Index> row_of_node;  // -1 for masked-out nodes
  bool dense = false;
  Eigen::MatrixXd dense_matrix;

  /// Σ·V for a tall M x q matrix, streaming row slabs in a fixed ascending
  /// order when the dense matrix is not held.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& V) const {
    if (V.rows() != m) throw err::invalid_argument("provider input has wrong row count");
    if (dense) return dense_matrix * V;

    const auto g = static_cast<std::size_t>(cov->grid.size());
    Eigen::MatrixXd out(m, V.cols());
    const Index slab = std::max<Index>(1, static_cast<Index>(kSlabBytes / (sizeof(double) * static_cast<std::size_t>(m))));
    Eigen::MatrixXd buf;
    for (Index r0 = 0; r0 < m; r0 += slab) {
      const Index rows = std::min(slab, m - r0);
      buf.resize(rows, m);
      for (Index i = 0; i < rows; ++i) {
        const auto base = static_cast<std::size_t>(node_of_row[static_cast<std::size_t>(r0 + i)]) * g;
        for (Index j = 0; j < m; ++j)
          buf(i, j) = cov->values[base + static_cast<std::size_t>(node_of_row[static_cast<std::size_t>(j)])];
      }
      out.middleRows(r0, rows) = buf * V;
    }
    return out;
  }
};

/** @brief Reshapes a covariance surface into its in-mask matrix form. */
inline MatrixizedCovariance matrixize(const SurfaceEstimate& cov,
                                      std::size_t dense_budget = MatrixizedCovariance::kDenseBudget) {
  if (cov.kind != SurfaceKind::Covariance)
    throw err::invalid_argument("matrixize expects a covariance surface");
  const EvaluationGrid& grid = cov.grid;
  const auto g = static_cast<std::size_t>(grid.size());
  if (cov.values.size() != g * g)
    throw err::invalid_argument("covariance surface has wrong length");

  MatrixizedCovariance out;
  out.cov = &cov;
  out.row_of_node.assign(g, -1);
  for (std::size_t f = 0; f < g; ++f) {
    if (!grid.in_mask(static_cast<Index>(f))) continue;
    out.row_of_node[f] = out.m;
    out.node_of_row.push_back(static_cast<Index>(f));
    ++out.m;
  }
  if (out.m == 0) throw err::invalid_argument("no in-mask nodes to decompose");

  const std::size_t bytes = static_cast<std::size_t>(out.m) * static_cast<std::size_t>(out.m) * sizeof(double);
  out.dense = bytes <= dense_budget;
  if (out.dense) {
    out.dense_matrix.resize(out.m, out.m);
    for (Index i = 0; i < out.m; ++i) {
      const auto base = static_cast<std::size_t>(out.node_of_row[static_cast<std::size_t>(i)]) * g;
      for (Index j = 0; j < out.m; ++j)
        out.dense_matrix(i, j) =
            cov.values[base + static_cast<std::size_t>(out.node_of_row[static_cast<std::size_t>(j)])];
    }
  }
  return out;
}

/**
 * @brief Eigenpairs of the covariance operator under the Riemann inner
 * product: eigenvalues are matrix eigenvalues times the cell volume,
 * eigenfunctions are unit-norm under cell_volume * sum(phi^2).
 */
struct EigenSystem {
  std::vector<double> eigenvalues;                  // positive, descending
  std::vector<std::vector<double>> eigenfunctions;  // full-grid surfaces
  std::vector<double> fve;                          // cumulative fraction of variation
  double total_variance = 0.0;                      // sum of all positive eigenvalues
};

namespace detail {

/// Eigenvalues below this fraction of the leading one are indistinguishable
/// from rank-deficiency round-off and are truncated with the nonpositive ones.
constexpr double kEigNoiseRelTol = 1e-12;

/// Riemann inner product of two matrix-coordinate vectors.
inline double riemann_dot(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double cell_volume) {
  return cell_volume * a.dot(b);
}

/// Flips each eigenvector to the canonical sign: positive Riemann inner
/// product against the all-ones surface, falling back to a positive first
/// nonzero in-mask value when that inner product vanishes.
inline void canonicalize_sign(Eigen::VectorXd& v, double cell_volume) {
  double s = cell_volume * v.sum();
  if (std::abs(s) < 1e-12 * std::sqrt(cell_volume * static_cast<double>(v.size()))) {
    s = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (v[i] != 0.0) {
        s = v[i];
        break;
      }
  }
  if (s < 0.0) v = -v;
}

/// Shared tail of both eigensolvers: Riemann normalization (optionally with
/// modified Gram-Schmidt when the candidates are only approximately
/// orthogonal), positive truncation, sign canonicalization, scatter to
/// full-grid surfaces, and FVE accumulation.
inline EigenSystem finalize_eigensystem(const MatrixizedCovariance& S, const EvaluationGrid& grid,
                                        const std::vector<double>& tilde_desc,
                                        Eigen::MatrixXd& vectors, std::size_t L_max,
                                        bool gram_schmidt) {
  const double cv = grid.cell_volume();
  EigenSystem out;
  const double cut = tilde_desc.empty() ? 0.0 : std::max(0.0, tilde_desc[0]) * kEigNoiseRelTol;
  double tilde_total = 0.0;
  for (double t : tilde_desc)
    if (t > cut) tilde_total += t;
  out.total_variance = tilde_total * cv;

  std::vector<Eigen::VectorXd> kept;
  for (std::size_t l = 0; l < tilde_desc.size() && out.eigenvalues.size() < L_max; ++l) {
    if (!(tilde_desc[l] > cut)) break;  // descending: the rest are nonpositive or noise
    Eigen::VectorXd v = vectors.col(static_cast<Eigen::Index>(l));
    if (gram_schmidt) {
      for (const auto& u : kept) v -= riemann_dot(u, v, cv) * u;
      const double norm = std::sqrt(riemann_dot(v, v, cv));
      if (!(norm > 1e-10)) continue;  // numerically inside the span already kept
      v /= norm;
    } else {
      const double norm = std::sqrt(riemann_dot(v, v, cv));
      v /= norm;
    }
    canonicalize_sign(v, cv);
    kept.push_back(v);
    out.eigenvalues.push_back(tilde_desc[l] * cv);
  }

  const auto g = static_cast<std::size_t>(grid.size());
  out.eigenfunctions.reserve(kept.size());
  for (const auto& v : kept) {
    std::vector<double> surf(g, outside_value());
    for (Index r = 0; r < S.m; ++r)
      surf[static_cast<std::size_t>(S.node_of_row[static_cast<std::size_t>(r)])] = v[r];
    out.eigenfunctions.push_back(std::move(surf));
  }

  double cum = 0.0;
  out.fve.reserve(out.eigenvalues.size());
  for (double lam : out.eigenvalues) {
    cum += lam;
    out.fve.push_back(out.total_variance > 0.0 ? cum / out.total_variance : 1.0);
  }
  return out;
}

}  // namespace detail

/**
 * @brief Full symmetric eigendecomposition of the matrixized covariance.
 *
 * Requires the dense provider. Eigenvalues are rescaled by the cell volume
 * and eigenfunctions to unit Riemann norm; nonpositive eigenvalues are
 * dropped and excluded from the FVE denominator.
 */
inline EigenSystem dense_eig(const MatrixizedCovariance& S, std::size_t L_max,
                             const EvaluationGrid& grid) {
  if (!S.dense)
    throw err::invalid_argument("dense eigendecomposition needs the dense provider; "
                                "the matrix exceeded the memory budget");
  const auto n = static_cast<lapack_int>(S.m);
  Eigen::MatrixXd A = S.dense_matrix;  // overwritten with eigenvectors
  std::vector<double> w(static_cast<std::size_t>(S.m), 0.0);
  const lapack_int info =
      LAPACKE_dsyevd(LAPACK_COL_MAJOR, 'V', 'L', n, A.data(), n, w.data());
  if (info != 0)
    throw err::eig_failure("symmetric eigensolver did not converge (info=" +
                           std::to_string(info) + ")");

  // Ascending from LAPACK; reorder descending.
  std::vector<double> tilde;
  Eigen::MatrixXd vectors(S.m, S.m);
  for (Index l = 0; l < S.m; ++l) {
    const Index src = S.m - 1 - l;
    tilde.push_back(w[static_cast<std::size_t>(src)]);
    vectors.col(l) = A.col(src);
  }
  return detail::finalize_eigensystem(S, grid, tilde, vectors, L_max, false);
}

/// Default sketch size: max(2 L_max + 10, 99), capped at the matrix size.
inline std::size_t default_sketch_size(std::size_t L_max, Index m) {
  const std::size_t q = std::max(2 * L_max + 10, static_cast<std::size_t>(99));
  return std::min(q, static_cast<std::size_t>(m));
}

/**
 * @brief Random-projection eigensolver.
 *
 * Draws a seeded M x q sketch with iid Normal(0, 1/q) entries, captures the
 * range of Σ applied to it, projects to the q x q problem, eigendecomposes,
 * lifts the eigenvectors back, re-orthonormalizes under the Riemann inner
 * product, and rescales as in dense_eig. Exact (to conditioning) whenever
 * rank(Σ) ≤ q; bit-reproducible for a fixed seed.
 */
inline EigenSystem randomized_eig(const MatrixizedCovariance& S, std::size_t q, std::size_t L_max,
                                  const EvaluationGrid& grid, std::uint64_t seed) {
  if (q < L_max)
    throw err::sketch_too_small("sketch size " + std::to_string(q) +
                                " is below the requested component count " + std::to_string(L_max));
  q = std::min(q, static_cast<std::size_t>(S.m));

  // Column-major fill order is part of the seeded contract.
  const auto qi = static_cast<Eigen::Index>(q);
  Eigen::MatrixXd omega(S.m, qi);
  RandomStream rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(q));
  for (Eigen::Index j = 0; j < qi; ++j)
    for (Eigen::Index i = 0; i < S.m; ++i) omega(i, j) = sd * rng.normal();

  // Range capture and projection.
  Eigen::MatrixXd Y = S.apply(omega);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Y);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(S.m, qi);
  Eigen::MatrixXd small = Q.transpose() * S.apply(Q);
  small = 0.5 * (small + small.transpose()).eval();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(small);
  if (es.info() != Eigen::Success)
    throw err::eig_failure("projected eigensolver did not converge");

  std::vector<double> tilde;
  Eigen::MatrixXd lifted(S.m, qi);
  for (Eigen::Index l = 0; l < qi; ++l) {
    const Eigen::Index src = qi - 1 - l;  // ascending -> descending
    tilde.push_back(es.eigenvalues()[src]);
    lifted.col(l) = Q * es.eigenvectors().col(src);
  }
  return detail::finalize_eigensystem(S, grid, tilde, lifted, L_max, true);
}

/** @brief Smallest L whose cumulative FVE reaches the threshold. */
inline std::size_t select_components_fve(const EigenSystem& eig, double threshold) {
  if (!(threshold > 0.0) || threshold > 1.0)
    throw err::invalid_argument("FVE threshold must lie in (0, 1]");
  for (std::size_t l = 0; l < eig.fve.size(); ++l)
    if (eig.fve[l] >= threshold - 1e-12) return l + 1;
  return eig.eigenvalues.size();
}

/**
 * @brief Residual diagnostic per eigenpair: the Riemann L2 norm of
 * (integral of Γ(t,s) φ(s) ds) - λ φ(t), zero for exact eigenpairs.
 */
inline std::vector<double> eig_residuals(const MatrixizedCovariance& S, const EigenSystem& eig,
                                         const EvaluationGrid& grid) {
  const double cv = grid.cell_volume();
  const auto L = static_cast<Eigen::Index>(eig.eigenvalues.size());
  if (L == 0) return {};
  Eigen::MatrixXd V(S.m, L);
  for (Eigen::Index l = 0; l < L; ++l)
    for (Index r = 0; r < S.m; ++r)
      V(r, l) = eig.eigenfunctions[static_cast<std::size_t>(l)]
                                  [static_cast<std::size_t>(S.node_of_row[static_cast<std::size_t>(r)])];
  Eigen::MatrixXd SV = S.apply(V);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(L));
  for (Eigen::Index l = 0; l < L; ++l) {
    const Eigen::VectorXd r = cv * SV.col(l) - eig.eigenvalues[static_cast<std::size_t>(l)] * V.col(l);
    out.push_back(std::sqrt(cv * r.squaredNorm()));
  }
  return out;
}

}  // namespace dfpca
