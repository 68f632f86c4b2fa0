#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dfpca/dataset.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/surface.hpp"

namespace dfpca {

struct BinOptions {
  /// Accumulate the aggregate grids used by mean / squared-value smoothing.
  bool mean_path = true;
  /// Keep per-sample grids and pair diagonal corrections for the covariance
  /// smoother. Memory: 2 * n_samples * grid.size() doubles.
  bool covariance_path = false;
};

/**
 * @brief Linearly binned dataset.
 *
 * Each observation distributes unit mass multilinearly over the 2^d corners
 * of its containing cell; coordinates exactly on the hull boundary bin to the
 * boundary node with full mass along that axis.
 *
 * Weights ride in the binned mass: the aggregate (mean-path) grids weight
 * every observation of sample i by 1/N_i, so `mass` sums to the number of
 * samples. Per-sample grids are stored unweighted; the per-pair weight
 * 1/(N_i (N_i - 1)) is kept separately and applied when sample grids are
 * combined into pair products.
 *
 * The pair diagonal corrections subtract the j == l self-pairs that a plain
 * outer product of binned grids would include. A single observation's mass
 * lands on corners that differ by at most one node per axis, so the
 * correction lives on a band of 3^d offsets per node and is accumulated over
 * all samples during binning: memory O(grid), not O(n_samples * grid).
 */
struct BinnedData {
  EvaluationGrid grid;

  // Aggregate grids, observation weight 1/N_i (mean_path).
  std::vector<double> mass;    // sum of weights
  std::vector<double> wvalue;  // sum of weight * y
  std::vector<double> wsquare; // sum of weight * y^2

  // Per-sample grids for the covariance path; only samples with >= 2
  // observations participate.
  struct SampleGrids {
    std::size_t sample_index = 0;  // index into the source dataset
    double pair_weight = 0.0;      // 1 / (N_i (N_i - 1))
    std::vector<double> mass;      // unweighted multilinear mass
    std::vector<double> value;     // mass * y
  };
  std::vector<SampleGrids> per_sample;

  // Diagonal-correction bands, pair weight applied: index u * 3^d + code,
  // code encoding the offset o in {-1,0,1}^d as digits o_k + 1 (last axis
  // fastest). diag_mass pairs masses, diag_value pairs y*y' = y^2.
  std::vector<double> diag_mass;
  std::vector<double> diag_value;

  std::vector<std::size_t> sample_sizes;  // N_i for every sample
  bool has_mean_path = false;
  bool has_covariance_path = false;

  std::size_t offset_codes() const {
    std::size_t c = 1;
    for (std::size_t k = 0; k < grid.dim(); ++k) c *= 3;
    return c;
  }
};

/**
 * @brief Bins a dataset onto an evaluation grid with multilinear mass.
 *
 * Every observation must lie inside the grid hull (ObservationOutsideGrid
 * otherwise, naming the offending sample).
 */
inline BinnedData linear_bin(const FunctionalDataset& data, const EvaluationGrid& grid,
                             const BinOptions& opt = {}) {
  const std::size_t d = grid.dim();
  if (data.dim != d) throw err::invalid_argument("dataset/grid dimension mismatch");

  BinnedData out;
  out.grid = grid;
  out.has_mean_path = opt.mean_path;
  out.has_covariance_path = opt.covariance_path;
  const auto g = static_cast<std::size_t>(grid.size());
  if (opt.mean_path) {
    out.mass.assign(g, 0.0);
    out.wvalue.assign(g, 0.0);
    out.wsquare.assign(g, 0.0);
  }
  const std::size_t n_codes = out.offset_codes();
  if (opt.covariance_path) {
    out.diag_mass.assign(g * n_codes, 0.0);
    out.diag_value.assign(g * n_codes, 0.0);
  }
  out.sample_sizes.reserve(data.n_samples());

  const std::size_t corners = static_cast<std::size_t>(1) << d;
  std::vector<Index> cell(d);
  std::vector<double> frac(d);
  std::vector<Index> corner_flat(corners);
  std::vector<double> corner_mass(corners);

  for (std::size_t i = 0; i < data.n_samples(); ++i) {
    const Sample& s = data.samples[i];
    const std::size_t n = s.n_obs();
    out.sample_sizes.push_back(n);
    const double mean_w = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;

    BinnedData::SampleGrids* sg = nullptr;
    if (opt.covariance_path && n >= 2) {
      out.per_sample.push_back({});
      sg = &out.per_sample.back();
      sg->sample_index = i;
      sg->pair_weight = 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
      sg->mass.assign(g, 0.0);
      sg->value.assign(g, 0.0);
    }
    const double pw = sg ? sg->pair_weight : 0.0;

    for (std::size_t j = 0; j < n; ++j) {
      const double* x = s.coord(j, d);
      if (!grid.hull_contains(x))
        throw err::observation_outside_grid("sample '" + s.id + "' observation " +
                                            std::to_string(j) + " lies outside the grid hull");
      for (std::size_t k = 0; k < d; ++k)
        detail::locate_cell(grid.axis(k), x[k], cell[k], frac[k]);

      for (std::size_t c = 0; c < corners; ++c) {
        double m = 1.0;
        Index flat = 0;
        for (std::size_t k = 0; k < d; ++k) {
          const bool up = (c >> k) & 1U;
          m *= up ? frac[k] : (1.0 - frac[k]);
          flat += (cell[k] + (up ? 1 : 0)) * grid.strides()[k];
        }
        corner_flat[c] = flat;
        corner_mass[c] = m;
      }

      const double y = s.values[j];
      if (opt.mean_path) {
        for (std::size_t c = 0; c < corners; ++c) {
          const auto f = static_cast<std::size_t>(corner_flat[c]);
          const double wm = mean_w * corner_mass[c];
          out.mass[f] += wm;
          out.wvalue[f] += wm * y;
          out.wsquare[f] += wm * y * y;
        }
      }
      if (sg) {
        for (std::size_t c = 0; c < corners; ++c) {
          const auto f = static_cast<std::size_t>(corner_flat[c]);
          sg->mass[f] += corner_mass[c];
          sg->value[f] += corner_mass[c] * y;
        }
        // Self-pair band: all corner pairs of this observation.
        for (std::size_t c1 = 0; c1 < corners; ++c1) {
          if (corner_mass[c1] == 0.0) continue;
          for (std::size_t c2 = 0; c2 < corners; ++c2) {
            if (corner_mass[c2] == 0.0) continue;
            std::size_t code = 0;
            for (std::size_t k = 0; k < d; ++k) {
              const int o = static_cast<int>((c2 >> k) & 1U) - static_cast<int>((c1 >> k) & 1U);
              code = code * 3 + static_cast<std::size_t>(o + 1);
            }
            const std::size_t band = static_cast<std::size_t>(corner_flat[c1]) * n_codes + code;
            const double mm = pw * corner_mass[c1] * corner_mass[c2];
            out.diag_mass[band] += mm;
            out.diag_value[band] += mm * y * y;
          }
        }
      }
    }
  }
  return out;
}

namespace detail {

/// Decodes a band offset code back into per-axis offsets in {-1, 0, 1}
/// (last axis fastest, matching the encoding in linear_bin).
inline void decode_offset(std::size_t code, std::size_t dim, std::vector<int>& out) {
  out.resize(dim);
  for (std::size_t k = dim; k-- > 0;) {
    out[k] = static_cast<int>(code % 3) - 1;
    code /= 3;
  }
}

}  // namespace detail
}  // namespace dfpca
