#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dfpca/errors.hpp"

namespace dfpca {

/// Flattened arrays everywhere use row-major order with the LAST axis varying
/// fastest; this is normative for every file format and in-memory layout.
using Index = std::int64_t;

/// Marker stored at masked-out grid nodes of flattened surfaces.
inline double outside_value() { return std::numeric_limits<double>::quiet_NaN(); }
inline bool is_outside(double v) { return std::isnan(v); }

/// Half-open multi-dimensional index range [lo, hi) used by block plans and
/// the convolution engine. Axes follow the owning grid's axis order.
struct Box {
  std::vector<Index> lo;
  std::vector<Index> hi;

  std::size_t dim() const { return lo.size(); }
  Index extent(std::size_t k) const { return hi[k] - lo[k]; }
  Index volume() const {
    Index v = 1;
    for (std::size_t k = 0; k < lo.size(); ++k) v *= extent(k);
    return v;
  }
  bool contains(const std::vector<Index>& idx) const {
    for (std::size_t k = 0; k < lo.size(); ++k)
      if (idx[k] < lo[k] || idx[k] >= hi[k]) return false;
    return true;
  }
  static Box full(const std::vector<Index>& shape) {
    return Box{std::vector<Index>(shape.size(), 0), shape};
  }
};

namespace detail {

/// Strides for row-major, last-axis-fastest flattening.
inline std::vector<Index> strides_of(const std::vector<Index>& shape) {
  std::vector<Index> s(shape.size(), 1);
  for (int k = static_cast<int>(shape.size()) - 2; k >= 0; --k)
    s[static_cast<std::size_t>(k)] = s[static_cast<std::size_t>(k) + 1] * shape[static_cast<std::size_t>(k) + 1];
  return s;
}

inline Index flatten(const std::vector<Index>& idx, const std::vector<Index>& strides) {
  Index f = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) f += idx[k] * strides[k];
  return f;
}

inline void unflatten(Index flat, const std::vector<Index>& shape, std::vector<Index>& out) {
  out.resize(shape.size());
  for (int k = static_cast<int>(shape.size()) - 1; k >= 0; --k) {
    const auto ku = static_cast<std::size_t>(k);
    out[ku] = flat % shape[ku];
    flat /= shape[ku];
  }
}

/// Odometer-style advance of a multi-index within a box; returns false after
/// the last position. Iteration order matches the flattened order.
inline bool advance(std::vector<Index>& idx, const Box& box) {
  for (int k = static_cast<int>(idx.size()) - 1; k >= 0; --k) {
    const auto ku = static_cast<std::size_t>(k);
    if (++idx[ku] < box.hi[ku]) return true;
    idx[ku] = box.lo[ku];
  }
  return false;
}

}  // namespace detail

/**
 * @brief Rectangular evaluation grid with optional in-domain mask.
 *
 * Axes hold strictly increasing node coordinates. The optional mask flags
 * nodes inside the domain of interest (1 = inside); all flattened node data
 * follows the normative row-major / last-axis-fastest order. Masked-out nodes
 * of any surface hold the outside sentinel (NaN) and never participate in
 * Riemann sums.
 */
class EvaluationGrid {
 public:
  EvaluationGrid() = default;

  explicit EvaluationGrid(std::vector<std::vector<double>> axes,
                          std::optional<std::vector<std::uint8_t>> mask = std::nullopt)
      : axes_(std::move(axes)), mask_(std::move(mask)) {
    if (axes_.empty()) throw err::invalid_argument("grid needs at least one axis");
    shape_.reserve(axes_.size());
    for (std::size_t k = 0; k < axes_.size(); ++k) {
      const auto& ax = axes_[k];
      if (ax.size() < 2)
        throw err::invalid_argument("grid axis " + std::to_string(k) + " needs >= 2 nodes");
      for (std::size_t j = 1; j < ax.size(); ++j)
        if (!(ax[j] > ax[j - 1]))
          throw err::invalid_argument("grid axis " + std::to_string(k) +
                                      " is not strictly increasing");
      shape_.push_back(static_cast<Index>(ax.size()));
    }
    strides_ = detail::strides_of(shape_);
    total_ = strides_[0] * shape_[0];
    if (mask_ && static_cast<Index>(mask_->size()) != total_)
      throw err::invalid_argument("mask size does not match grid node count");
    spacing_.resize(axes_.size());
    equispaced_ = true;
    for (std::size_t k = 0; k < axes_.size(); ++k) {
      const auto& ax = axes_[k];
      const double mean_gap = (ax.back() - ax.front()) / static_cast<double>(ax.size() - 1);
      spacing_[k] = mean_gap;
      for (std::size_t j = 1; j < ax.size(); ++j)
        if (std::abs((ax[j] - ax[j - 1]) - mean_gap) > 1e-9 * mean_gap) {
          equispaced_ = false;
          break;
        }
    }
  }

  /// Endpoint-inclusive equispaced grid: nodes at lo, lo+d, ..., hi.
  static EvaluationGrid uniform(const std::vector<double>& lo, const std::vector<double>& hi,
                                const std::vector<Index>& counts) {
    std::vector<std::vector<double>> axes(lo.size());
    for (std::size_t k = 0; k < lo.size(); ++k) {
      if (!(hi[k] > lo[k])) throw err::degenerate_axis("axis " + std::to_string(k) + " has zero extent");
      const Index n = counts[k];
      axes[k].resize(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i)
        axes[k][static_cast<std::size_t>(i)] =
            lo[k] + (hi[k] - lo[k]) * static_cast<double>(i) / static_cast<double>(n - 1);
      axes[k].back() = hi[k];
    }
    return EvaluationGrid(std::move(axes));
  }

  /// Cell-midpoint grid: n cells over [lo, hi], nodes at cell centers. Riemann
  /// sums on this layout have O(spacing^2) error instead of O(spacing).
  static EvaluationGrid midpoint(const std::vector<double>& lo, const std::vector<double>& hi,
                                 const std::vector<Index>& counts) {
    std::vector<std::vector<double>> axes(lo.size());
    for (std::size_t k = 0; k < lo.size(); ++k) {
      if (!(hi[k] > lo[k])) throw err::degenerate_axis("axis " + std::to_string(k) + " has zero extent");
      const Index n = counts[k];
      const double d = (hi[k] - lo[k]) / static_cast<double>(n);
      axes[k].resize(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i)
        axes[k][static_cast<std::size_t>(i)] = lo[k] + d * (static_cast<double>(i) + 0.5);
    }
    return EvaluationGrid(std::move(axes));
  }

  std::size_t dim() const { return axes_.size(); }
  const std::vector<std::vector<double>>& axes() const { return axes_; }
  const std::vector<double>& axis(std::size_t k) const { return axes_[k]; }
  const std::vector<Index>& shape() const { return shape_; }
  const std::vector<Index>& strides() const { return strides_; }
  Index size() const { return total_; }
  bool equispaced() const { return equispaced_; }
  double spacing(std::size_t k) const { return spacing_[k]; }

  /// Product of per-axis spacings; the Riemann cell volume used by the
  /// eigenvalue rescaling and all grid integrals.
  double cell_volume() const {
    double v = 1.0;
    for (double s : spacing_) v *= s;
    return v;
  }

  const std::optional<std::vector<std::uint8_t>>& mask() const { return mask_; }
  bool has_mask() const { return mask_.has_value(); }
  bool in_mask(Index flat) const { return !mask_ || (*mask_)[static_cast<std::size_t>(flat)] != 0; }

  Index in_mask_count() const {
    if (!mask_) return total_;
    Index m = 0;
    for (auto b : *mask_) m += (b != 0);
    return m;
  }

  Index flat_index(const std::vector<Index>& idx) const { return detail::flatten(idx, strides_); }
  void multi_index(Index flat, std::vector<Index>& out) const { detail::unflatten(flat, shape_, out); }

  double node(std::size_t axis_k, Index i) const {
    return axes_[axis_k][static_cast<std::size_t>(i)];
  }

  /// Coordinates of a flattened node, written into out (size dim()).
  void node_coords(Index flat, std::vector<double>& out) const {
    out.resize(dim());
    for (int k = static_cast<int>(dim()) - 1; k >= 0; --k) {
      const auto ku = static_cast<std::size_t>(k);
      out[ku] = axes_[ku][static_cast<std::size_t>(flat % shape_[ku])];
      flat /= shape_[ku];
    }
  }

  double hull_lo(std::size_t k) const { return axes_[k].front(); }
  double hull_hi(std::size_t k) const { return axes_[k].back(); }

  bool hull_contains(const double* coord, double tol_scale = 1e-12) const {
    for (std::size_t k = 0; k < dim(); ++k) {
      const double tol = tol_scale * (hull_hi(k) - hull_lo(k));
      if (coord[k] < hull_lo(k) - tol || coord[k] > hull_hi(k) + tol) return false;
    }
    return true;
  }

  void require_equispaced(const std::string& who) const {
    if (!equispaced_)
      throw err::grid_not_equispaced(who + " requires equispaced grid axes");
  }

 private:
  std::vector<std::vector<double>> axes_;
  std::optional<std::vector<std::uint8_t>> mask_;
  std::vector<Index> shape_;
  std::vector<Index> strides_;
  std::vector<double> spacing_;
  Index total_ = 0;
  bool equispaced_ = false;
};

}  // namespace dfpca
