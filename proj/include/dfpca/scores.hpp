#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dfpca/dataset.hpp"
#include "dfpca/eigensolve.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/surface.hpp"

// Noise-variance pooling, per-sample component scores (conditional-expectation
// and integration variants), curve reconstruction, and the leave-one-
// location-out prediction error.

namespace dfpca {

enum class ScoreMethod { Pace, Integration };

inline std::string score_method_name(ScoreMethod m) {
  return m == ScoreMethod::Pace ? "pace" : "integration";
}

inline ScoreMethod parse_score_method(const std::string& s) {
  if (s == "pace") return ScoreMethod::Pace;
  if (s == "integration") return ScoreMethod::Integration;
  throw err::invalid_argument("unknown score method '" + s + "' (expected pace|integration)");
}

/**
 * @brief Everything needed to reconstruct fitted curves: mean surface,
 * eigen system, pooled noise variance, per-sample scores, and the
 * configuration the fit was produced with.
 */
struct FpcaModel {
  SurfaceEstimate mean;
  EigenSystem eig;
  double sigma2 = 0.0;
  std::vector<std::vector<double>> scores;  // n rows of L entries
  std::vector<std::string> sample_ids;      // row labels for the score table

  Bandwidth mean_bandwidth;
  Bandwidth cov_bandwidth;
  Bandwidth diag_bandwidth;
  double fve_threshold = 0.0;
  std::uint64_t seed = 0;
  ScoreMethod score_method = ScoreMethod::Pace;

  std::size_t n_components() const { return eig.eigenvalues.size(); }
  const EvaluationGrid& grid() const { return mean.grid; }

  void validate() const {
    if (!(sigma2 >= 0.0) || !std::isfinite(sigma2))
      throw err::invalid_argument("model noise variance must be finite and nonnegative");
    if (mean.kind != SurfaceKind::Mean)
      throw err::invalid_argument("model mean surface has the wrong kind");
    const std::size_t L = n_components();
    for (const auto& row : scores) {
      if (row.size() != L) throw err::invalid_argument("score row length differs from component count");
      for (double a : row)
        if (!std::isfinite(a)) throw err::invalid_argument("scores must be finite");
    }
    if (!sample_ids.empty() && sample_ids.size() != scores.size())
      throw err::invalid_argument("sample id count differs from score row count");
  }
};

/**
 * @brief Pooled noise variance from the three smoothed surfaces.
 *
 * Pointwise the squared-value surface estimates the curve variance plus the
 * squared mean plus the noise, so the noise at a node is
 * diag_plus_noise - cov(t,t) - mean(t)^2. The node values are averaged over
 * the in-mask domain (Riemann sum divided by in-mask volume, i.e. a plain
 * node average on a uniform grid) and clamped at zero.
 */
inline double estimate_sigma2(const SurfaceEstimate& diag_plus_noise, const SurfaceEstimate& cov,
                              const SurfaceEstimate& mean) {
  if (diag_plus_noise.kind != SurfaceKind::DiagPlusNoise || cov.kind != SurfaceKind::Covariance ||
      mean.kind != SurfaceKind::Mean)
    throw err::invalid_argument("estimate_sigma2 got surfaces of the wrong kind");
  const EvaluationGrid& grid = mean.grid;
  const Index g = grid.size();
  if (diag_plus_noise.grid.size() != g || cov.grid.size() != g)
    throw err::invalid_argument("estimate_sigma2 surfaces must share one grid");

  double acc = 0.0;
  Index count = 0;
  for (Index f = 0; f < g; ++f) {
    if (!grid.in_mask(f)) continue;
    const double b0 = diag_plus_noise.at(f);
    const double gd = cov.at_pair(f, f);
    const double mu = mean.at(f);
    if (is_outside(b0) || is_outside(gd) || is_outside(mu)) continue;
    acc += b0 - gd - mu * mu;
    ++count;
  }
  if (count == 0) return 0.0;
  return std::max(0.0, acc / static_cast<double>(count));
}

namespace detail {

/// Relative floor applied to the noise variance inside the conditional-
/// expectation system so it stays invertible on noise-free data.
constexpr double kSigmaFloorRel = 1e-6;

/// Observation-level design for one sample: centered values and eigenfunction
/// evaluations at the usable observation coordinates. Observations whose
/// interpolations land fully outside the mask are dropped.
struct ObsDesign {
  Eigen::VectorXd centered;
  Eigen::MatrixXd phi;  // n_used x L
};

inline ObsDesign build_design(const Sample& sample, const FpcaModel& model) {
  const EvaluationGrid& grid = model.grid();
  const std::size_t d = grid.dim();
  const std::size_t L = model.n_components();

  std::vector<double> yc;
  std::vector<double> rows;
  std::vector<double> phis(L);
  for (std::size_t j = 0; j < sample.n_obs(); ++j) {
    const double* coord = sample.coord(j, d);
    const double mu = interp_multilinear(grid, model.mean.values, coord);
    if (is_outside(mu)) continue;
    bool usable = true;
    for (std::size_t l = 0; l < L; ++l) {
      phis[l] = interp_multilinear(grid, model.eig.eigenfunctions[l], coord);
      if (is_outside(phis[l])) {
        usable = false;
        break;
      }
    }
    if (!usable) continue;
    yc.push_back(sample.values[j] - mu);
    rows.insert(rows.end(), phis.begin(), phis.end());
  }

  ObsDesign out;
  const auto n = static_cast<Eigen::Index>(yc.size());
  out.centered.resize(n);
  out.phi.resize(n, static_cast<Eigen::Index>(L));
  for (Eigen::Index i = 0; i < n; ++i) {
    out.centered[i] = yc[static_cast<std::size_t>(i)];
    for (std::size_t l = 0; l < L; ++l)
      out.phi(i, static_cast<Eigen::Index>(l)) = rows[static_cast<std::size_t>(i) * L + l];
  }
  return out;
}

}  // namespace detail

/**
 * @brief Conditional-expectation scores for one sample.
 *
 * Builds the observation covariance sum_l lambda_l phi_l phi_l^T + sigma^2 I
 * at the sample's coordinates (eigenfunctions and mean evaluated by
 * multilinear interpolation, noise floored at kSigmaFloorRel * lambda_1) and
 * returns lambda_l phi_l^T Sigma^{-1} (Y - mu) for every component.
 */
inline std::vector<double> pace_scores(const Sample& sample, const FpcaModel& model) {
  const std::size_t L = model.n_components();
  if (L == 0) return {};
  const auto design = detail::build_design(sample, model);
  const Eigen::Index n = design.centered.size();
  if (n == 0) return std::vector<double>(L, 0.0);

  const double noise =
      std::max(model.sigma2, detail::kSigmaFloorRel * model.eig.eigenvalues[0]);
  Eigen::VectorXd lambda(static_cast<Eigen::Index>(L));
  for (std::size_t l = 0; l < L; ++l) lambda[static_cast<Eigen::Index>(l)] = model.eig.eigenvalues[l];

  Eigen::MatrixXd sigma_y = design.phi * lambda.asDiagonal() * design.phi.transpose();
  sigma_y.diagonal().array() += noise;

  Eigen::LDLT<Eigen::MatrixXd> ldlt(sigma_y);
  if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 0.0)
    throw err::singular_covariance("observation covariance is numerically singular even after "
                                   "the noise floor");
  const Eigen::VectorXd w = ldlt.solve(design.centered);

  std::vector<double> out(L);
  for (std::size_t l = 0; l < L; ++l)
    out[l] = lambda[static_cast<Eigen::Index>(l)] * design.phi.col(static_cast<Eigen::Index>(l)).dot(w);
  return out;
}

/**
 * @brief Integration scores for densely observed samples.
 *
 * The sample's values are gridded by tent-weight averaging onto the model
 * grid; each score is the Riemann inner product of the centered gridded curve
 * with the matching eigenfunction. Nodes without nearby observations (or
 * masked out) contribute nothing. Sets *sparse_warning when the sample has
 * fewer observations than a quarter of the grid nodes.
 */
inline std::vector<double> integration_scores(const Sample& sample, const FpcaModel& model,
                                              bool* sparse_warning = nullptr) {
  const EvaluationGrid& grid = model.grid();
  const std::size_t d = grid.dim();
  const std::size_t L = model.n_components();
  const auto g = static_cast<std::size_t>(grid.size());
  if (sparse_warning)
    *sparse_warning = sample.n_obs() * 4 < static_cast<std::size_t>(grid.size());
  if (L == 0) return {};

  // Tent-weight gridding of the sample onto the nodes.
  std::vector<double> mass(g, 0.0), wval(g, 0.0);
  std::vector<Index> cell(d);
  std::vector<double> frac(d);
  for (std::size_t j = 0; j < sample.n_obs(); ++j) {
    const double* coord = sample.coord(j, d);
    if (!grid.hull_contains(coord))
      throw err::out_of_domain("observation outside the grid hull cannot be scored");
    for (std::size_t k = 0; k < d; ++k)
      detail::locate_cell(grid.axis(k), coord[k], cell[k], frac[k]);
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
      mass[static_cast<std::size_t>(flat)] += w;
      wval[static_cast<std::size_t>(flat)] += w * sample.values[j];
    }
  }

  std::vector<double> out(L, 0.0);
  const double cv = grid.cell_volume();
  for (std::size_t f = 0; f < g; ++f) {
    if (!grid.in_mask(static_cast<Index>(f)) || mass[f] <= 0.0) continue;
    const double mu = model.mean.values[f];
    if (is_outside(mu)) continue;
    const double centered = wval[f] / mass[f] - mu;
    for (std::size_t l = 0; l < L; ++l) {
      const double p = model.eig.eigenfunctions[l][f];
      if (!is_outside(p)) out[l] += centered * p * cv;
    }
  }
  return out;
}

/// Integration scores when the typical sample covers at least a quarter of
/// the grid nodes; conditional-expectation scores otherwise.
inline ScoreMethod choose_score_method(const FunctionalDataset& data, const EvaluationGrid& grid) {
  return data.median_obs_per_sample() >= 0.25 * static_cast<double>(grid.size())
             ? ScoreMethod::Integration
             : ScoreMethod::Pace;
}

/// Scores for one sample by the requested method.
inline std::vector<double> compute_scores(const Sample& sample, const FpcaModel& model,
                                          ScoreMethod method, bool* sparse_warning = nullptr) {
  return method == ScoreMethod::Pace ? pace_scores(sample, model)
                                     : integration_scores(sample, model, sparse_warning);
}

/** @brief Fitted curve on the model grid: mean plus score-weighted eigenfunctions. */
inline std::vector<double> reconstruct_on_grid(const FpcaModel& model,
                                               const std::vector<double>& scores) {
  const std::size_t L = model.n_components();
  if (scores.size() != L) throw err::invalid_argument("score vector length differs from component count");
  const auto g = static_cast<std::size_t>(model.grid().size());
  std::vector<double> out(g, outside_value());
  for (std::size_t f = 0; f < g; ++f) {
    const double mu = model.mean.values[f];
    if (is_outside(mu)) continue;
    double x = mu;
    for (std::size_t l = 0; l < L; ++l) {
      const double p = model.eig.eigenfunctions[l][f];
      if (is_outside(p)) {
        x = outside_value();
        break;
      }
      x += scores[l] * p;
    }
    out[f] = x;
  }
  return out;
}

inline std::vector<double> reconstruct_on_grid(const FpcaModel& model, std::size_t sample_index) {
  if (sample_index >= model.scores.size())
    throw err::invalid_argument("sample index outside the fitted score table");
  return reconstruct_on_grid(model, model.scores[sample_index]);
}

/** @brief Fitted curve value at one coordinate (multilinear interpolation). */
inline double reconstruct_at(const FpcaModel& model, const std::vector<double>& scores,
                             const double* coord) {
  const std::size_t L = model.n_components();
  if (scores.size() != L) throw err::invalid_argument("score vector length differs from component count");
  double x = interp_multilinear(model.grid(), model.mean.values, coord);
  if (is_outside(x)) return outside_value();
  for (std::size_t l = 0; l < L; ++l) {
    const double p = interp_multilinear(model.grid(), model.eig.eigenfunctions[l], coord);
    if (is_outside(p)) return outside_value();
    x += scores[l] * p;
  }
  return x;
}

inline double reconstruct_at(const FpcaModel& model, std::size_t sample_index, const double* coord) {
  if (sample_index >= model.scores.size())
    throw err::invalid_argument("sample index outside the fitted score table");
  return reconstruct_at(model, model.scores[sample_index], coord);
}

/** @brief Leave-one-location-out prediction error summary. */
struct HoldoutResult {
  std::vector<double> per_location;  // squared-error sum per held-out location
  double mean = 0.0;
  double standard_error = 0.0;
};

/**
 * @brief Squared prediction error when each location is predicted from the
 * others.
 *
 * For every held-out location, each sample is re-scored from its remaining
 * observations (surfaces stay fixed), the curve is evaluated at the held-out
 * coordinate, and the squared errors of the removed observations are summed.
 */
inline HoldoutResult holdout_prediction_error(const FunctionalDataset& data,
                                              const std::vector<std::vector<double>>& locations,
                                              const FpcaModel& model, ScoreMethod method,
                                              double match_tol = 1e-9) {
  if (locations.size() < 2)
    throw err::invalid_argument("leave-one-location-out needs at least two locations");
  const std::size_t d = data.dim;
  for (const auto& s : locations)
    if (s.size() != d) throw err::invalid_argument("held-out location has the wrong dimension");

  std::vector<double> tol(d);
  for (std::size_t k = 0; k < d; ++k)
    tol[k] = match_tol * (model.grid().hull_hi(k) - model.grid().hull_lo(k));

  HoldoutResult out;
  out.per_location.assign(locations.size(), 0.0);
  Sample reduced;
  for (std::size_t i = 0; i < locations.size(); ++i) {
    const double* s = locations[i].data();
    for (const auto& sample : data.samples) {
      reduced.coords.clear();
      reduced.values.clear();
      std::vector<double> held_values;
      for (std::size_t j = 0; j < sample.n_obs(); ++j) {
        const double* c = sample.coord(j, d);
        bool at_location = true;
        for (std::size_t k = 0; k < d; ++k)
          if (std::abs(c[k] - s[k]) > tol[k]) {
            at_location = false;
            break;
          }
        if (at_location) {
          held_values.push_back(sample.values[j]);
        } else {
          reduced.coords.insert(reduced.coords.end(), c, c + d);
          reduced.values.push_back(sample.values[j]);
        }
      }
      if (held_values.empty()) continue;
      const auto scores = compute_scores(reduced, model, method);
      const double pred = reconstruct_at(model, scores, s);
      if (is_outside(pred)) continue;
      for (double y : held_values) out.per_location[i] += (y - pred) * (y - pred);
    }
  }

  const auto m = static_cast<double>(out.per_location.size());
  for (double e : out.per_location) out.mean += e;
  out.mean /= m;
  double var = 0.0;
  for (double e : out.per_location) var += (e - out.mean) * (e - out.mean);
  var /= (m - 1.0);
  out.standard_error = std::sqrt(var / m);
  return out;
}

}  // namespace dfpca
