#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"

namespace dfpca {

/**
 * @brief One observed random function: id, observation coordinates, values.
 *
 * Coordinates are stored flat, one row of `dim` doubles per observation, so a
 * sample with N observations holds N*dim coordinate doubles.
 */
struct Sample {
  std::string id;
  std::vector<double> coords;
  std::vector<double> values;

  std::size_t n_obs() const { return values.size(); }
  const double* coord(std::size_t j, std::size_t dim) const { return coords.data() + j * dim; }
};

/// Axis-aligned bounding box of a dataset.
struct BoundingBox {
  std::vector<double> lo;
  std::vector<double> hi;
  double extent(std::size_t k) const { return hi[k] - lo[k]; }
};

struct FunctionalDataset {
  std::size_t dim = 0;
  std::vector<Sample> samples;

  std::size_t n_samples() const { return samples.size(); }
  std::size_t n_obs() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.n_obs();
    return n;
  }

  BoundingBox bounding_box() const {
    BoundingBox box;
    box.lo.assign(dim, std::numeric_limits<double>::infinity());
    box.hi.assign(dim, -std::numeric_limits<double>::infinity());
    for (const auto& s : samples)
      for (std::size_t j = 0; j < s.n_obs(); ++j)
        for (std::size_t k = 0; k < dim; ++k) {
          const double x = s.coords[j * dim + k];
          box.lo[k] = std::min(box.lo[k], x);
          box.hi[k] = std::max(box.hi[k], x);
        }
    return box;
  }

  /// Median observation count per sample (used by the score-method rule).
  double median_obs_per_sample() const {
    if (samples.empty()) return 0.0;
    std::vector<std::size_t> counts(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) counts[i] = samples[i].n_obs();
    std::sort(counts.begin(), counts.end());
    const std::size_t m = counts.size();
    return (m % 2 == 1) ? static_cast<double>(counts[m / 2])
                        : 0.5 * static_cast<double>(counts[m / 2 - 1] + counts[m / 2]);
  }
};

/**
 * @brief Per-axis kernel bandwidths (same length as the data dimension).
 *
 * Entries must be strictly positive and no larger than the extent of their
 * axis; validate() enforces this against a grid hull or bounding box.
 */
struct Bandwidth {
  std::vector<double> h;

  std::size_t dim() const { return h.size(); }
  double operator[](std::size_t k) const { return h[k]; }

  void validate(const std::vector<double>& extents) const {
    if (h.size() != extents.size())
      throw err::invalid_bandwidth("bandwidth dimension mismatch");
    for (std::size_t k = 0; k < h.size(); ++k) {
      if (!(h[k] > 0.0))
        throw err::invalid_bandwidth("bandwidth axis " + std::to_string(k) +
                                     " must be positive");
      if (h[k] > extents[k] * (1.0 + 1e-12))
        throw err::invalid_bandwidth("bandwidth axis " + std::to_string(k) +
                                     " exceeds the axis extent");
    }
  }

  void validate(const EvaluationGrid& grid) const {
    std::vector<double> ext(grid.dim());
    for (std::size_t k = 0; k < grid.dim(); ++k) ext[k] = grid.hull_hi(k) - grid.hull_lo(k);
    validate(ext);
  }

  Bandwidth scaled(double factor) const {
    Bandwidth out = *this;
    for (auto& v : out.h) v *= factor;
    return out;
  }
};

/// Affine map x -> scale * x + offset applied per axis, with its inverse.
struct AffineMap {
  std::vector<double> scale;
  std::vector<double> offset;

  double forward(std::size_t k, double x) const { return scale[k] * x + offset[k]; }
  double inverse(std::size_t k, double y) const { return (y - offset[k]) / scale[k]; }
};

/**
 * @brief Rescales a dataset so its bounding box becomes the unit cube.
 *
 * The map is built from the data bounding box (lo -> 0, hi -> 1 per axis);
 * the returned AffineMap converts normalized coordinates back to data units.
 * An axis whose observed extent is zero cannot be normalized.
 */
inline AffineMap normalize_domain(FunctionalDataset& data) {
  const BoundingBox box = data.bounding_box();
  AffineMap map;
  map.scale.resize(data.dim);
  map.offset.resize(data.dim);
  for (std::size_t k = 0; k < data.dim; ++k) {
    const double ext = box.extent(k);
    if (!(ext > 0.0))
      throw err::degenerate_axis("axis " + std::to_string(k) +
                                 " has zero extent; cannot normalize");
    map.scale[k] = 1.0 / ext;
    map.offset[k] = -box.lo[k] / ext;
  }
  for (auto& s : data.samples)
    for (std::size_t j = 0; j < s.n_obs(); ++j)
      for (std::size_t k = 0; k < data.dim; ++k) {
        double& x = s.coords[j * data.dim + k];
        x = (x - box.lo[k]) / box.extent(k);
      }
  return map;
}

}  // namespace dfpca
