#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dfpca/dataset.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/rng.hpp"
#include "dfpca/surface.hpp"

// Seeded generators for the two reference simulation models, the error
// metrics used to report them (MISE / sign-aligned ISE), and an empirical
// convergence-rate report.

namespace dfpca {

enum class SimDesign {
  GridNodes,      // observe every grid node
  Equispaced,     // fixed equispaced points over the hull (one axis only)
  UniformRandom,  // per-sample uniform random points in the hull
};

/**
 * @brief Specification of a simulated functional sample set.
 *
 * The process is mean + sum_l A_l phi_l with scores A_l ~ Normal(0,
 * lambda_l) and additive Normal(0, sigma2) observation noise. Mean and
 * eigenfunctions are analytic callables evaluated at arbitrary coordinates;
 * eigenfunctions must be orthonormal on the evaluation grid (checked by
 * quadrature). Per-sample randomness comes from substreams of the master
 * seed (scores, coordinates, noise), so generation is bit-reproducible and
 * independent of sample processing order.
 */
struct SimSpec {
  std::string name = "custom";
  std::size_t n = 100;
  SimDesign design = SimDesign::GridNodes;
  std::size_t points_per_sample = 0;  // Equispaced / UniformRandom designs
  EvaluationGrid grid;
  std::uint64_t seed = 20260815;
  bool store_grid_truth = true;

  std::function<double(const double*)> mean;
  std::vector<std::function<double(const double*)>> eigenfunctions;
  std::vector<double> lambda;
  double sigma2 = 0.0;

  void validate() const {
    if (n == 0) throw err::invalid_argument("simulation needs at least one sample");
    if (!mean) throw err::invalid_argument("simulation mean function not set");
    if (eigenfunctions.size() != lambda.size())
      throw err::invalid_argument("eigenfunction and score-variance counts differ");
    for (std::size_t l = 0; l < lambda.size(); ++l) {
      if (!(lambda[l] >= 0.0))
        throw err::invalid_argument("score variances must be nonnegative");
      if (l > 0 && lambda[l] > lambda[l - 1])
        throw err::invalid_argument("score variances must be descending");
    }
    if (design != SimDesign::GridNodes && points_per_sample == 0)
      throw err::invalid_argument("point designs need points_per_sample > 0");
    if (design == SimDesign::Equispaced && grid.dim() != 1)
      throw err::invalid_argument("the equispaced design is one-dimensional");

    // Orthonormality on the evaluation grid, by Riemann quadrature.
    const std::size_t L = eigenfunctions.size();
    std::vector<std::vector<double>> phi(L);
    std::vector<double> coord;
    for (std::size_t l = 0; l < L; ++l) {
      phi[l].resize(static_cast<std::size_t>(grid.size()));
      for (Index f = 0; f < grid.size(); ++f) {
        grid.node_coords(f, coord);
        phi[l][static_cast<std::size_t>(f)] = eigenfunctions[l](coord.data());
      }
    }
    for (std::size_t a = 0; a < L; ++a)
      for (std::size_t b = a; b < L; ++b) {
        double dot = 0.0;
        for (Index f = 0; f < grid.size(); ++f) {
          if (!grid.in_mask(f)) continue;
          dot += phi[a][static_cast<std::size_t>(f)] * phi[b][static_cast<std::size_t>(f)];
        }
        dot *= grid.cell_volume();
        const double want = a == b ? 1.0 : 0.0;
        if (std::abs(dot - want) > 1e-3)
          throw err::invalid_argument("eigenfunctions are not orthonormal on the grid (pair " +
                                      std::to_string(a) + "," + std::to_string(b) + " -> " +
                                      std::to_string(dot) + ")");
      }
  }
};

/// Reference model on [0, 10]: mean t + sin t, two cosine/sine components
/// with variances (4, 1), noise variance 1/4. Defaults to the desk-scale
/// 1000 equispaced points per curve on a 400-cell evaluation grid.
inline SimSpec sim1_spec(std::size_t n = 100, std::size_t points_per_sample = 1000,
                         Index grid_cells = 400, std::uint64_t seed = 20260815) {
  SimSpec spec;
  spec.name = "sim1";
  spec.n = n;
  spec.design = SimDesign::Equispaced;
  spec.points_per_sample = points_per_sample;
  spec.grid = EvaluationGrid::midpoint({0.0}, {10.0}, {grid_cells});
  spec.seed = seed;
  spec.mean = [](const double* t) { return t[0] + std::sin(t[0]); };
  const double pi = std::acos(-1.0);
  spec.eigenfunctions = {
      [pi](const double* t) { return -std::cos(pi * t[0] / 10.0) / std::sqrt(5.0); },
      [pi](const double* t) { return std::sin(pi * t[0] / 10.0) / std::sqrt(5.0); }};
  spec.lambda = {4.0, 1.0};
  spec.sigma2 = 0.25;
  return spec;
}

/// Reference model on [0,1]^3: Gaussian-bump mean, four product-sine
/// components rescaled to unit norm, variances 4^(3-l), noise variance 1/16.
/// Defaults to the desk-scale 16^3 grid with observations at every node.
inline SimSpec sim2_spec(std::size_t n = 100, Index cells_per_axis = 16,
                         std::uint64_t seed = 20260815) {
  SimSpec spec;
  spec.name = "sim2";
  spec.n = n;
  spec.design = SimDesign::GridNodes;
  spec.grid = EvaluationGrid::midpoint({0.0, 0.0, 0.0}, {1.0, 1.0, 1.0},
                                       {cells_per_axis, cells_per_axis, cells_per_axis});
  spec.seed = seed;
  spec.mean = [](const double* t) {
    double q = 0.0;
    for (std::size_t k = 0; k < 3; ++k) q += (t[k] - 0.5) * (t[k] - 0.5);
    return std::exp(q);
  };
  const double pi = std::acos(-1.0);
  // The raw product-sine components have squared norm 1/8 on the unit cube;
  // sqrt(8) restores unit norm so score variances equal eigenvalues.
  for (int l = 1; l <= 4; ++l) {
    spec.eigenfunctions.push_back([pi, l](const double* t) {
      double p = std::sqrt(8.0);
      for (std::size_t k = 0; k < 3; ++k) p *= std::sin(2.0 * l * pi * t[k]);
      return p;
    });
  }
  spec.lambda = {16.0, 4.0, 1.0, 0.25};
  spec.sigma2 = 1.0 / 16.0;
  return spec;
}

/** @brief Ground truth accompanying a generated dataset. */
struct SimTruth {
  std::vector<std::vector<double>> scores;          // n x L
  std::vector<std::vector<double>> noiseless;       // per-sample X_i at its coordinates
  std::vector<std::vector<double>> curves_on_grid;  // n x grid nodes (optional)
  std::vector<double> mean_on_grid;
  std::vector<std::vector<double>> phi_on_grid;     // L x grid nodes
};

/**
 * @brief Draws the seeded dataset and its ground truth.
 *
 * Sample i uses substreams (3i) for scores, (3i+1) for coordinates, and
 * (3i+2) for noise, in that drawing order, so any prefix of samples is
 * reproducible regardless of n.
 */
inline std::pair<FunctionalDataset, SimTruth> generate(const SimSpec& spec) {
  spec.validate();
  const std::size_t d = spec.grid.dim();
  const std::size_t L = spec.lambda.size();
  const auto g = static_cast<std::size_t>(spec.grid.size());

  SimTruth truth;
  truth.mean_on_grid.resize(g);
  truth.phi_on_grid.assign(L, std::vector<double>(g));
  std::vector<double> coord;
  for (Index f = 0; f < spec.grid.size(); ++f) {
    spec.grid.node_coords(f, coord);
    truth.mean_on_grid[static_cast<std::size_t>(f)] = spec.mean(coord.data());
    for (std::size_t l = 0; l < L; ++l)
      truth.phi_on_grid[l][static_cast<std::size_t>(f)] = spec.eigenfunctions[l](coord.data());
  }

  // Observation coordinates shared by deterministic designs.
  std::vector<double> fixed_coords;
  if (spec.design == SimDesign::GridNodes) {
    fixed_coords.reserve(g * d);
    for (Index f = 0; f < spec.grid.size(); ++f) {
      if (!spec.grid.in_mask(f)) continue;
      spec.grid.node_coords(f, coord);
      fixed_coords.insert(fixed_coords.end(), coord.begin(), coord.end());
    }
  } else if (spec.design == SimDesign::Equispaced) {
    const auto p = spec.points_per_sample;
    const double lo = spec.grid.hull_lo(0), hi = spec.grid.hull_hi(0);
    for (std::size_t j = 0; j < p; ++j)
      fixed_coords.push_back(p == 1 ? 0.5 * (lo + hi)
                                    : lo + (hi - lo) * static_cast<double>(j) /
                                               static_cast<double>(p - 1));
  }

  FunctionalDataset data;
  data.dim = d;
  data.samples.resize(spec.n);
  truth.scores.resize(spec.n);
  truth.noiseless.resize(spec.n);
  if (spec.store_grid_truth) truth.curves_on_grid.resize(spec.n);

  const double noise_sd = std::sqrt(spec.sigma2);
  for (std::size_t i = 0; i < spec.n; ++i) {
    RandomStream score_rng = RandomStream::substream(spec.seed, 3 * i);
    auto& a = truth.scores[i];
    a.resize(L);
    for (std::size_t l = 0; l < L; ++l) a[l] = std::sqrt(spec.lambda[l]) * score_rng.normal();

    Sample& s = data.samples[i];
    s.id = std::to_string(i);
    if (spec.design == SimDesign::UniformRandom) {
      RandomStream coord_rng = RandomStream::substream(spec.seed, 3 * i + 1);
      s.coords.resize(spec.points_per_sample * d);
      for (std::size_t j = 0; j < spec.points_per_sample; ++j)
        for (std::size_t k = 0; k < d; ++k)
          s.coords[j * d + k] = spec.grid.hull_lo(k) +
                                (spec.grid.hull_hi(k) - spec.grid.hull_lo(k)) * coord_rng.uniform();
    } else {
      s.coords = fixed_coords;
    }

    const std::size_t n_obs = s.coords.size() / d;
    auto& clean = truth.noiseless[i];
    clean.resize(n_obs);
    for (std::size_t j = 0; j < n_obs; ++j) {
      const double* c = s.coords.data() + j * d;
      double x = spec.mean(c);
      for (std::size_t l = 0; l < L; ++l) x += a[l] * spec.eigenfunctions[l](c);
      clean[j] = x;
    }

    RandomStream noise_rng = RandomStream::substream(spec.seed, 3 * i + 2);
    s.values.resize(n_obs);
    for (std::size_t j = 0; j < n_obs; ++j) s.values[j] = clean[j] + noise_sd * noise_rng.normal();

    if (spec.store_grid_truth) {
      auto& curve = truth.curves_on_grid[i];
      curve.resize(g);
      for (std::size_t f = 0; f < g; ++f) {
        double x = truth.mean_on_grid[f];
        for (std::size_t l = 0; l < L; ++l) x += a[l] * truth.phi_on_grid[l][f];
        curve[f] = x;
      }
    }
  }
  return {std::move(data), std::move(truth)};
}

/** @brief Mean over samples of the Riemann-integrated squared error. */
inline double mise(const std::vector<std::vector<double>>& estimates,
                   const std::vector<std::vector<double>>& truth, const EvaluationGrid& grid) {
  if (estimates.size() != truth.size() || estimates.empty())
    throw err::invalid_argument("mise needs matching nonempty sample sets");
  double acc = 0.0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    double ise_i = 0.0;
    for (Index f = 0; f < grid.size(); ++f) {
      if (!grid.in_mask(f)) continue;
      const double a = estimates[i][static_cast<std::size_t>(f)];
      const double b = truth[i][static_cast<std::size_t>(f)];
      if (is_outside(a) || is_outside(b)) continue;
      ise_i += (a - b) * (a - b);
    }
    acc += ise_i * grid.cell_volume();
  }
  return acc / static_cast<double>(estimates.size());
}

/** @brief Sign-aligned integrated squared error between two surfaces. */
inline double ise(const std::vector<double>& phi_hat, const std::vector<double>& phi,
                  const EvaluationGrid& grid) {
  double dot = 0.0;
  for (Index f = 0; f < grid.size(); ++f) {
    if (!grid.in_mask(f)) continue;
    const double a = phi_hat[static_cast<std::size_t>(f)];
    const double b = phi[static_cast<std::size_t>(f)];
    if (is_outside(a) || is_outside(b)) continue;
    dot += a * b;
  }
  const double sign = dot >= 0.0 ? 1.0 : -1.0;
  double acc = 0.0;
  for (Index f = 0; f < grid.size(); ++f) {
    if (!grid.in_mask(f)) continue;
    const double a = phi_hat[static_cast<std::size_t>(f)];
    const double b = phi[static_cast<std::size_t>(f)];
    if (is_outside(a) || is_outside(b)) continue;
    const double diff = a - sign * b;
    acc += diff * diff;
  }
  return acc * grid.cell_volume();
}

/** @brief Log-log slope report for an error-versus-sample-size family. */
struct RateReport {
  std::vector<double> ns;
  std::vector<double> errors;
  double slope = std::numeric_limits<double>::quiet_NaN();
  bool monotone_decreasing = false;
  bool degenerate = false;  // all errors numerically zero; slope undefined
};

inline RateReport empirical_rate_check(const std::vector<double>& ns,
                                       const std::vector<double>& errors) {
  if (ns.size() < 3 || ns.size() != errors.size())
    throw err::invalid_argument("rate check needs at least three (n, error) pairs");
  RateReport rep;
  rep.ns = ns;
  rep.errors = errors;
  rep.degenerate = true;
  rep.monotone_decreasing = true;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (errors[i] > 1e-12) rep.degenerate = false;
    if (i > 0 && !(errors[i] < errors[i - 1])) rep.monotone_decreasing = false;
  }
  if (rep.degenerate) return rep;

  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const auto m = static_cast<double>(ns.size());
  for (std::size_t i = 0; i < ns.size(); ++i) {
    const double x = std::log(ns[i]);
    const double y = std::log(std::max(errors[i], 1e-300));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  rep.slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  return rep;
}

}  // namespace dfpca
