#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"

namespace dfpca {

enum class SurfaceKind {
  Mean,          // values on grid nodes
  Covariance,    // values on (s, t) node pairs: flat = s_flat * grid.size() + t_flat
  DiagPlusNoise  // smoothed squared-value surface on grid nodes
};

/**
 * @brief A smoothed surface sampled on an evaluation grid.
 *
 * Mean and diag surfaces hold grid.size() values; covariance surfaces hold
 * grid.size()^2 values over concatenated (s-axes, t-axes) in the normative
 * flattening. Masked-out nodes (either endpoint for covariance) hold the
 * outside sentinel and are skipped by every integral.
 */
struct SurfaceEstimate {
  EvaluationGrid grid;
  std::vector<double> values;
  SurfaceKind kind = SurfaceKind::Mean;

  double at(Index flat) const { return values[static_cast<std::size_t>(flat)]; }
  double at_pair(Index s_flat, Index t_flat) const {
    return values[static_cast<std::size_t>(s_flat * grid.size() + t_flat)];
  }
};

namespace detail {

/// Per-axis cell locator for multilinear operations. Returns the lower node
/// index (clamped so cell+1 is valid) and the fractional position in [0, 1].
/// Coordinates exactly on the upper hull land on the last node with frac 1.
inline void locate_cell(const std::vector<double>& axis, double x, Index& cell, double& frac) {
  const auto n = static_cast<Index>(axis.size());
  if (x <= axis.front()) {
    cell = 0;
    frac = 0.0;
    return;
  }
  if (x >= axis.back()) {
    cell = n - 2;
    frac = 1.0;
    return;
  }
  // Binary search for the containing cell (general, handles uneven axes).
  Index lo = 0, hi = n - 1;
  while (hi - lo > 1) {
    const Index mid = (lo + hi) / 2;
    if (axis[static_cast<std::size_t>(mid)] <= x)
      lo = mid;
    else
      hi = mid;
  }
  cell = lo;
  frac = (x - axis[static_cast<std::size_t>(lo)]) /
         (axis[static_cast<std::size_t>(lo + 1)] - axis[static_cast<std::size_t>(lo)]);
}

}  // namespace detail

/**
 * @brief Multilinear interpolation of flattened node values at a coordinate.
 *
 * The coordinate must lie inside the grid hull (OutOfDomain otherwise). If
 * some cell corners are masked out, the finite corners are re-weighted; if no
 * corner is usable the outside sentinel is returned.
 */
inline double interp_multilinear(const EvaluationGrid& grid, const std::vector<double>& values,
                                 const double* coord) {
  const std::size_t d = grid.dim();
  if (!grid.hull_contains(coord))
    throw err::out_of_domain("coordinate outside the grid hull");

  std::vector<Index> cell(d);
  std::vector<double> frac(d);
  for (std::size_t k = 0; k < d; ++k) detail::locate_cell(grid.axis(k), coord[k], cell[k], frac[k]);

  double acc = 0.0, wsum = 0.0;
  const std::size_t corners = static_cast<std::size_t>(1) << d;
  for (std::size_t c = 0; c < corners; ++c) {
    double w = 1.0;
    Index flat = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const bool up = (c >> k) & 1U;
      w *= up ? frac[k] : (1.0 - frac[k]);
      flat += (cell[k] + (up ? 1 : 0)) * grid.strides()[k];
    }
    if (w == 0.0) continue;
    const double v = values[static_cast<std::size_t>(flat)];
    if (is_outside(v)) continue;
    acc += w * v;
    wsum += w;
  }
  if (wsum <= 0.0) return outside_value();
  return acc / wsum;
}

/// Riemann integral of a nodewise function over in-mask nodes:
/// cell_volume * sum f(node). Masked nodes are skipped.
template <typename F>
double riemann_sum(const EvaluationGrid& grid, F&& f) {
  double acc = 0.0;
  for (Index i = 0; i < grid.size(); ++i)
    if (grid.in_mask(i)) acc += f(i);
  return acc * grid.cell_volume();
}

}  // namespace dfpca
