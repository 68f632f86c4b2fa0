#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dfpca/binning.hpp"
#include "dfpca/dataset.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/kernel.hpp"
#include "dfpca/local_fit.hpp"
#include "dfpca/parallel.hpp"
#include "dfpca/surface.hpp"

namespace dfpca {
namespace detail {

/// Per-axis node index range [lo, hi] whose coordinates lie within
/// x +/- radius. Returns false when the range is empty.
inline bool axis_window(const std::vector<double>& axis, double x, double radius, Index& lo,
                        Index& hi) {
  const auto begin = axis.begin();
  lo = static_cast<Index>(std::lower_bound(begin, axis.end(), x - radius) - begin);
  hi = static_cast<Index>(std::upper_bound(begin, axis.end(), x + radius) - begin) - 1;
  return lo <= hi;
}

/**
 * @brief Solves local-linear systems node by node over a flattened domain.
 *
 * `gather` recomputes a node's normal equations at an enlarged bandwidth and
 * returns whether any kernel mass was found; it backs the empty-window
 * fallback ladder. Nodes that stay empty after kWindowRetries enlargements
 * raise BandwidthTooSmall carrying the affected node count (the per-node
 * condition is AllWeightsZero).
 */
inline void solve_moment_surface(
    Index count, const MomentBasis& basis, const std::vector<double>& S,
    const std::vector<double>& T, const std::function<bool(Index)>& in_mask,
    const std::function<bool(Index, double, Eigen::MatrixXd&, Eigen::VectorXd&)>& gather,
    std::vector<double>& out, const std::string& who) {
  const std::size_t nm = basis.count();
  const std::size_t nl = basis.count_linear();
  out.assign(static_cast<std::size_t>(count), outside_value());

  std::atomic<Index> empty_nodes{0};
  parallel_for(static_cast<std::size_t>(count), 4096, [&](std::size_t b, std::size_t e) {
    Eigen::MatrixXd A;
    Eigen::VectorXd rhs;
    for (std::size_t f = b; f < e; ++f) {
      const auto flat = static_cast<Index>(f);
      if (!in_mask(flat)) continue;
      assemble_normal_equations(basis, S.data() + f * nm, T.data() + f * nl, A, rhs);
      LocalSolve sol = solve_local(A, rhs);
      double scale = 1.0;
      for (int r = 0; r < kWindowRetries && sol.status == FitStatus::Empty; ++r) {
        scale *= kWindowGrowth;
        if (!gather(flat, scale, A, rhs)) continue;
        sol = solve_local(A, rhs);
      }
      if (sol.status == FitStatus::Empty) {
        empty_nodes.fetch_add(1);
        continue;
      }
      out[f] = sol.b0;
    }
  });

  if (empty_nodes.load() > 0)
    throw err::bandwidth_too_small(
        who + ": " + std::to_string(empty_nodes.load()) +
        " node(s) had no observation in the kernel window (AllWeightsZero) after " +
        std::to_string(kWindowRetries) + " window enlargements");
}

/// Direct gather of mean-path normal equations at one target, optionally at
/// an enlarged bandwidth, optionally excluding a single observation. Response
/// is y (mean) or y^2 (squares). Returns whether any mass was found.
inline bool gather_mean_equations(const FunctionalDataset& data, const double* t,
                                  const Bandwidth& bw, double scale, bool squares,
                                  long exclude_sample, long exclude_obs, Eigen::MatrixXd& A,
                                  Eigen::VectorXd& rhs) {
  const std::size_t d = data.dim;
  MomentBasis basis(d);
  std::vector<double> S(basis.count(), 0.0), T(basis.count_linear(), 0.0);
  std::vector<double> h(d), u(d);
  for (std::size_t k = 0; k < d; ++k) h[k] = bw[k] * scale;

  bool any = false;
  for (std::size_t i = 0; i < data.n_samples(); ++i) {
    const Sample& s = data.samples[i];
    if (s.n_obs() == 0) continue;
    const double w_i = 1.0 / static_cast<double>(s.n_obs());
    for (std::size_t j = 0; j < s.n_obs(); ++j) {
      if (static_cast<long>(i) == exclude_sample && static_cast<long>(j) == exclude_obs) continue;
      const double* x = s.coord(j, d);
      for (std::size_t k = 0; k < d; ++k) u[k] = t[k] - x[k];
      const double kw = kernel_eval(u.data(), h.data(), d);
      if (kw == 0.0) continue;
      any = true;
      const double y = squares ? s.values[j] * s.values[j] : s.values[j];
      accumulate_moments(basis, u.data(), w_i * kw, w_i * kw * y, S.data(), T.data());
    }
  }
  assemble_normal_equations(basis, S.data(), T.data(), A, rhs);
  return any;
}

/// Direct gather of covariance normal equations at one (s, t) target over the
/// j != l raw products, optionally excluding one ordered pair.
inline bool gather_pair_equations(const FunctionalDataset& data, const double* ts,
                                  const double* tt, const Bandwidth& bw, double scale,
                                  long exclude_sample, long exclude_j, long exclude_l,
                                  Eigen::MatrixXd& A, Eigen::VectorXd& rhs) {
  const std::size_t d = data.dim;
  MomentBasis basis(2 * d);
  std::vector<double> S(basis.count(), 0.0), T(basis.count_linear(), 0.0);
  std::vector<double> h(d), u(2 * d);
  for (std::size_t k = 0; k < d; ++k) h[k] = bw[k] * scale;

  std::vector<std::size_t> in_s, in_t;
  std::vector<double> kw_s, kw_t, us(d);
  bool any = false;
  for (std::size_t i = 0; i < data.n_samples(); ++i) {
    const Sample& smp = data.samples[i];
    const std::size_t n = smp.n_obs();
    if (n < 2) continue;
    const double pw = 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
    in_s.clear(); kw_s.clear();
    in_t.clear(); kw_t.clear();
    for (std::size_t j = 0; j < n; ++j) {
      const double* x = smp.coord(j, d);
      for (std::size_t k = 0; k < d; ++k) us[k] = ts[k] - x[k];
      const double ks = kernel_eval(us.data(), h.data(), d);
      if (ks != 0.0) { in_s.push_back(j); kw_s.push_back(ks); }
      for (std::size_t k = 0; k < d; ++k) us[k] = tt[k] - x[k];
      const double kt = kernel_eval(us.data(), h.data(), d);
      if (kt != 0.0) { in_t.push_back(j); kw_t.push_back(kt); }
    }
    for (std::size_t a = 0; a < in_s.size(); ++a) {
      const std::size_t j = in_s[a];
      const double* xj = smp.coord(j, d);
      for (std::size_t b = 0; b < in_t.size(); ++b) {
        const std::size_t l = in_t[b];
        if (l == j) continue;  // raw products exclude the diagonal
        if (static_cast<long>(i) == exclude_sample && static_cast<long>(j) == exclude_j &&
            static_cast<long>(l) == exclude_l)
          continue;
        const double* xl = smp.coord(l, d);
        for (std::size_t k = 0; k < d; ++k) {
          u[k] = ts[k] - xj[k];
          u[d + k] = tt[k] - xl[k];
        }
        const double w = pw * kw_s[a] * kw_t[b];
        any = true;
        accumulate_moments(basis, u.data(), w, w * smp.values[j] * smp.values[l], S.data(),
                           T.data());
      }
    }
  }
  assemble_normal_equations(basis, S.data(), T.data(), A, rhs);
  return any;
}

}  // namespace detail

/**
 * @brief Direct d-variate local linear mean estimate on grid nodes.
 *
 * Observations are weighted 1/N_i within their sample; the kernel is the
 * scaled product Epanechnikov. Rank-deficient windows fall back to the local
 * constant; empty windows retry with bandwidths enlarged 1.5x up to three
 * times before BandwidthTooSmall is raised. Masked-out nodes keep the
 * outside sentinel.
 */
inline SurfaceEstimate estimate_mean(const FunctionalDataset& data, const EvaluationGrid& grid,
                                     const Bandwidth& bw, bool squares = false) {
  const std::size_t d = grid.dim();
  if (data.dim != d) throw err::invalid_argument("dataset/grid dimension mismatch");
  bw.validate(grid);

  const detail::MomentBasis basis(d);
  const auto g = static_cast<std::size_t>(grid.size());
  std::vector<double> S(g * basis.count(), 0.0), T(g * basis.count_linear(), 0.0);

  // Scatter pass: each observation contributes to every node in its window.
  std::vector<Index> lo(d), hi(d), idx(d);
  std::vector<double> u(d);
  for (const Sample& s : data.samples) {
    if (s.n_obs() == 0) continue;
    const double w_i = 1.0 / static_cast<double>(s.n_obs());
    for (std::size_t j = 0; j < s.n_obs(); ++j) {
      const double* x = s.coord(j, d);
      if (!grid.hull_contains(x))
        throw err::observation_outside_grid("sample '" + s.id + "' lies outside the grid hull");
      bool empty = false;
      for (std::size_t k = 0; k < d; ++k)
        if (!detail::axis_window(grid.axis(k), x[k], bw[k], lo[k], hi[k])) { empty = true; break; }
      if (empty) continue;
      const double y = squares ? s.values[j] * s.values[j] : s.values[j];
      idx = lo;
      const Box win{lo, [&] { auto h2 = hi; for (auto& v : h2) ++v; return h2; }()};
      do {
        Index flat = 0;
        double kw = 1.0;
        for (std::size_t k = 0; k < d; ++k) {
          u[k] = grid.node(k, idx[k]) - x[k];
          kw *= kernel_axis(u[k], bw[k]);
          flat += idx[k] * grid.strides()[k];
        }
        if (kw != 0.0)
          detail::accumulate_moments(basis, u.data(), w_i * kw, w_i * kw * y,
                                     S.data() + static_cast<std::size_t>(flat) * basis.count(),
                                     T.data() + static_cast<std::size_t>(flat) * basis.count_linear());
      } while (detail::advance(idx, win));
    }
  }

  SurfaceEstimate out;
  out.grid = grid;
  out.kind = squares ? SurfaceKind::DiagPlusNoise : SurfaceKind::Mean;
  detail::solve_moment_surface(
      grid.size(), basis, S, T, [&](Index f) { return grid.in_mask(f); },
      [&](Index f, double scale, Eigen::MatrixXd& A, Eigen::VectorXd& rhs) {
        std::vector<double> coord(d);  // local: the fallback may run concurrently
        grid.node_coords(f, coord);
        return detail::gather_mean_equations(data, coord.data(), bw, scale, squares, -1, -1, A,
                                             rhs);
      },
      out.values, squares ? "estimate_diag_plus_noise" : "estimate_mean");
  return out;
}

/// Local linear smooth of squared responses; together with the covariance
/// diagonal and the mean it yields the noise variance estimate.
inline SurfaceEstimate estimate_diag_plus_noise(const FunctionalDataset& data,
                                                const EvaluationGrid& grid, const Bandwidth& bw) {
  return estimate_mean(data, grid, bw, /*squares=*/true);
}

/**
 * @brief Direct 2d-variate local linear covariance estimate on node pairs.
 *
 * Fits raw products Y_ij * Y_il over within-sample pairs j != l, each pair
 * weighted 1/(N_i (N_i - 1)), then subtracts the mean product and symmetrizes:
 * (G(s,t) + G(t,s)) / 2. Intended as the exact reference for the binned FFT
 * route; cost grows with (observations x window)^2, so keep inputs modest.
 */
inline SurfaceEstimate estimate_covariance(const FunctionalDataset& data,
                                           const EvaluationGrid& grid, const Bandwidth& bw,
                                           const SurfaceEstimate& mean) {
  const std::size_t d = grid.dim();
  if (data.dim != d) throw err::invalid_argument("dataset/grid dimension mismatch");
  bw.validate(grid);
  bool any_pairs = false;
  for (const auto& s : data.samples) any_pairs = any_pairs || s.n_obs() >= 2;
  if (!any_pairs) throw err::no_pairs("estimate_covariance: every sample has fewer than 2 observations");

  const detail::MomentBasis basis(2 * d);
  const auto g = static_cast<std::size_t>(grid.size());
  const std::size_t pair_count = g * g;
  std::vector<double> S(pair_count * basis.count(), 0.0), T(pair_count * basis.count_linear(), 0.0);

  // Scatter over pairs: precompute each observation's node window once per
  // sample, then cross j != l windows.
  struct WinEntry { Index flat; double kw; std::vector<double> u; };
  std::vector<Index> lo(d), hi(d), idx(d);
  for (const Sample& s : data.samples) {
    const std::size_t n = s.n_obs();
    if (n < 2) continue;
    const double pw = 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
    std::vector<std::vector<WinEntry>> windows(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double* x = s.coord(j, d);
      if (!grid.hull_contains(x))
        throw err::observation_outside_grid("sample '" + s.id + "' lies outside the grid hull");
      bool empty = false;
      for (std::size_t k = 0; k < d; ++k)
        if (!detail::axis_window(grid.axis(k), x[k], bw[k], lo[k], hi[k])) { empty = true; break; }
      if (empty) continue;
      idx = lo;
      const Box win{lo, [&] { auto h2 = hi; for (auto& v : h2) ++v; return h2; }()};
      do {
        WinEntry e;
        e.u.resize(d);
        e.kw = 1.0;
        e.flat = 0;
        for (std::size_t k = 0; k < d; ++k) {
          e.u[k] = grid.node(k, idx[k]) - x[k];
          e.kw *= kernel_axis(e.u[k], bw[k]);
          e.flat += idx[k] * grid.strides()[k];
        }
        if (e.kw != 0.0) windows[j].push_back(std::move(e));
      } while (detail::advance(idx, win));
    }
    std::vector<double> u2(2 * d);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t l = 0; l < n; ++l) {
        if (l == j) continue;
        const double yy = s.values[j] * s.values[l];
        for (const auto& ej : windows[j])
          for (const auto& el : windows[l]) {
            const double w = pw * ej.kw * el.kw;
            for (std::size_t k = 0; k < d; ++k) { u2[k] = ej.u[k]; u2[d + k] = el.u[k]; }
            const std::size_t pflat =
                static_cast<std::size_t>(ej.flat) * g + static_cast<std::size_t>(el.flat);
            detail::accumulate_moments(basis, u2.data(), w, w * yy,
                                       S.data() + pflat * basis.count(),
                                       T.data() + pflat * basis.count_linear());
          }
      }
  }

  SurfaceEstimate out;
  out.grid = grid;
  out.kind = SurfaceKind::Covariance;
  detail::solve_moment_surface(
      static_cast<Index>(pair_count), basis, S, T,
      [&](Index f) {
        return grid.in_mask(f / grid.size()) && grid.in_mask(f % grid.size());
      },
      [&](Index f, double scale, Eigen::MatrixXd& A, Eigen::VectorXd& rhs) {
        std::vector<double> cs(d), ct(d);  // local: the fallback may run concurrently
        grid.node_coords(f / grid.size(), cs);
        grid.node_coords(f % grid.size(), ct);
        return detail::gather_pair_equations(data, cs.data(), ct.data(), bw, scale, -1, -1, -1, A,
                                             rhs);
      },
      out.values, "estimate_covariance");

  // Subtract the mean product, then symmetrize.
  for (Index a = 0; a < grid.size(); ++a) {
    if (!grid.in_mask(a)) continue;
    const double ma = mean.at(a);
    for (Index b = 0; b < grid.size(); ++b) {
      if (!grid.in_mask(b)) continue;
      out.values[static_cast<std::size_t>(a * grid.size() + b)] -= ma * mean.at(b);
    }
  }
  for (Index a = 0; a < grid.size(); ++a)
    for (Index b = a; b < grid.size(); ++b) {
      const auto ab = static_cast<std::size_t>(a * grid.size() + b);
      const auto ba = static_cast<std::size_t>(b * grid.size() + a);
      const double sym = 0.5 * (out.values[ab] + out.values[ba]);
      out.values[ab] = sym;
      out.values[ba] = sym;
    }
  return out;
}

/// Result of a single-target local fit. inv00 is the first diagonal entry of
/// the inverted (ridged) normal matrix; the leave-one-out self-influence of
/// the observation sitting at the target is its weight times inv00.
struct PointFit {
  double value = 0.0;
  double inv00 = 0.0;
  FitStatus status = FitStatus::Empty;
};

struct PointFitOptions {
  double fixed_ridge = -1.0;  // >= 0 pins the ridge (exact leave-one-out algebra)
  bool squares = false;       // fit y^2 instead of y (mean-path targets only)
  bool want_inv00 = false;
  long exclude_sample = -1;   // drop one observation (mean) or ordered pair (cov)
  long exclude_j = -1;
  long exclude_l = -1;
};

/// Local linear mean (or squared-response) fit at one coordinate; weights and
/// kernel as in estimate_mean. No window-enlargement ladder: an empty window
/// reports FitStatus::Empty for the caller to handle.
inline PointFit fit_mean_point(const FunctionalDataset& data, const double* t, const Bandwidth& bw,
                               const PointFitOptions& opt = {}) {
  Eigen::MatrixXd A;
  Eigen::VectorXd rhs;
  PointFit out;
  if (!detail::gather_mean_equations(data, t, bw, 1.0, opt.squares, opt.exclude_sample,
                                     opt.exclude_j, A, rhs))
    return out;
  const detail::LocalSolve sol = detail::solve_local(A, rhs, opt.fixed_ridge, opt.want_inv00);
  out.value = sol.b0;
  out.inv00 = sol.inv00;
  out.status = sol.status;
  return out;
}

/// Local linear raw-product fit at one (s, t) coordinate pair; weights and
/// pair exclusion as in estimate_covariance. Returns the raw level (mean
/// product NOT subtracted).
inline PointFit fit_pair_point(const FunctionalDataset& data, const double* s, const double* t,
                               const Bandwidth& bw, const PointFitOptions& opt = {}) {
  Eigen::MatrixXd A;
  Eigen::VectorXd rhs;
  PointFit out;
  if (!detail::gather_pair_equations(data, s, t, bw, 1.0, opt.exclude_sample, opt.exclude_j,
                                     opt.exclude_l, A, rhs))
    return out;
  const detail::LocalSolve sol = detail::solve_local(A, rhs, opt.fixed_ridge, opt.want_inv00);
  out.value = sol.b0;
  out.inv00 = sol.inv00;
  out.status = sol.status;
  return out;
}

}  // namespace dfpca
