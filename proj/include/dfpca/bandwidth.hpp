#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dfpca/dataset.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/kernel.hpp"
#include "dfpca/rng.hpp"
#include "dfpca/smoother.hpp"

// Leave-one-observation-out cross-validation (via its exact linear-smoother
// shortcut) and a derivative-free trust-region optimizer with quadratic
// regression, working in log-bandwidth space.

namespace dfpca {

enum class CvTarget { Mean, Covariance, DiagPlusNoise };

inline std::string cv_target_name(CvTarget t) {
  switch (t) {
    case CvTarget::Mean: return "mean";
    case CvTarget::Covariance: return "covariance";
    default: return "diag";
  }
}

struct CvOptions {
  /// Evaluation units (observations, or raw pairs for the covariance target)
  /// are capped at this count by a seeded draw fixed at construction, keeping
  /// the objective a deterministic function of the bandwidth alone.
  std::size_t max_units = 2000;
  std::uint64_t seed = 0x5eedULL;
};

/**
 * @brief Leave-one-observation-out CV objective for one smoothing target.
 *
 * Each unit is one observation (mean, squared-value targets) or one ordered
 * raw-product pair (covariance target). The smoother is fitted once per unit
 * with a pinned zero ridge; the held-out residual is recovered from the full
 * fit as residual / (1 - self_influence), which is exact for linear
 * smoothers. Units whose window contains essentially only themselves carry no
 * out-of-sample information and are skipped; if every unit degenerates the
 * bandwidth is reported as too small.
 */
class CvObjective {
 public:
  CvObjective(const FunctionalDataset& data, const EvaluationGrid& grid, CvTarget target,
              CvOptions options = {})
      : data_(&data), target_(target), options_(options) {
    extents_.resize(grid.dim());
    for (std::size_t k = 0; k < grid.dim(); ++k)
      extents_[k] = grid.hull_hi(k) - grid.hull_lo(k);
    enumerate_units();
  }

  std::size_t dim() const { return extents_.size(); }
  std::size_t n_units() const { return units_.size(); }
  const std::vector<double>& extents() const { return extents_; }
  CvTarget target() const { return target_; }

  double operator()(const Bandwidth& h) const {
    h.validate(extents_);
    const std::size_t d = dim();
    double k0 = 1.0;
    for (std::size_t k = 0; k < d; ++k) k0 *= kernel_axis(0.0, h[k]);

    PointFitOptions opt;
    opt.fixed_ridge = 0.0;
    opt.want_inv00 = true;
    opt.squares = target_ == CvTarget::DiagPlusNoise;

    double acc = 0.0;
    std::size_t used = 0;
    std::vector<double> pair_coord(2 * d);
    for (const Unit& u : units_) {
      const Sample& sample = data_->samples[u.sample];
      const auto n_i = static_cast<double>(sample.n_obs());
      PointFit fit;
      double weight = 0.0;
      double y = 0.0;
      if (target_ == CvTarget::Covariance) {
        const double* s = sample.coord(u.j, d);
        const double* t = sample.coord(u.l, d);
        std::copy(s, s + d, pair_coord.begin());
        std::copy(t, t + d, pair_coord.begin() + static_cast<std::ptrdiff_t>(d));
        fit = fit_pair_point(*data_, pair_coord.data(), pair_coord.data() + d, h, opt);
        weight = 1.0 / (n_i * (n_i - 1.0));
        y = sample.values[u.j] * sample.values[u.l];
      } else {
        fit = fit_mean_point(*data_, sample.coord(u.j, d), h, opt);
        weight = 1.0 / n_i;
        y = sample.values[u.j];
        if (target_ == CvTarget::DiagPlusNoise) y *= y;
      }
      if (fit.status == FitStatus::Empty) continue;
      const double kernel0 = target_ == CvTarget::Covariance ? k0 * k0 : k0;
      const double self = weight * kernel0 * fit.inv00;
      const double denom = 1.0 - self;
      if (denom < kSelfOnlyTol) continue;  // the unit only ever sees itself
      const double r = (y - fit.value) / std::max(denom, kDenomClamp);
      acc += r * r;
      ++used;
    }
    if (used == 0)
      throw err::bandwidth_too_small(
          "no cross-validation unit has neighbors at bandwidth " + std::to_string(h[0]) +
          "; every window degenerates to its own observation");
    return acc / static_cast<double>(used);
  }

  static constexpr double kSelfOnlyTol = 1e-6;
  static constexpr double kDenomClamp = 1e-8;

 private:
  struct Unit {
    std::size_t sample;
    std::size_t j;
    std::size_t l;  // covariance target only
  };

  void enumerate_units() {
    for (std::size_t i = 0; i < data_->samples.size(); ++i) {
      const std::size_t n = data_->samples[i].n_obs();
      if (target_ == CvTarget::Covariance) {
        if (n < 2) continue;
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t l = 0; l < n; ++l)
            if (l != j) units_.push_back({i, j, l});
      } else {
        for (std::size_t j = 0; j < n; ++j) units_.push_back({i, j, 0});
      }
    }
    if (units_.empty())
      throw err::invalid_argument("cross-validation needs at least one evaluation unit");
    if (units_.size() > options_.max_units) {
      // Seeded partial Fisher-Yates: the kept prefix is a uniform subsample.
      RandomStream rng(options_.seed);
      for (std::size_t j = 0; j < options_.max_units; ++j) {
        const std::size_t pick =
            j + static_cast<std::size_t>(rng.uniform() * static_cast<double>(units_.size() - j));
        std::swap(units_[j], units_[std::min(pick, units_.size() - 1)]);
      }
      units_.resize(options_.max_units);
    }
  }

  const FunctionalDataset* data_;
  CvTarget target_;
  CvOptions options_;
  std::vector<double> extents_;
  std::vector<Unit> units_;
};

/** @brief Leave-one-observation-out CV score of a bandwidth. */
inline double cv_score(const Bandwidth& h, const CvObjective& obj) { return obj(h); }

/**
 * @brief Per-axis starting bandwidth targeting about thirty observations per
 * kernel window: range * (30 / N)^(1/d), capped at the axis range.
 */
inline Bandwidth rule_of_thumb_bandwidth(const FunctionalDataset& data,
                                         const std::vector<double>& extents,
                                         double target_obs = 30.0) {
  const auto n = static_cast<double>(data.n_obs());
  if (n <= 0.0) throw err::invalid_argument("cannot choose a bandwidth without observations");
  const double frac =
      std::min(1.0, std::pow(target_obs / n, 1.0 / static_cast<double>(extents.size())));
  Bandwidth h;
  h.h.resize(extents.size());
  for (std::size_t k = 0; k < extents.size(); ++k) h.h[k] = extents[k] * frac;
  return h;
}

struct OptimizeOptions {
  std::size_t budget = 60;       // total objective evaluations
  double initial_radius = 0.5;   // log-bandwidth units
  double radius_min = 1e-3;
  double radius_max = 2.0;
  double accept_ratio = 0.1;
  double expand_ratio = 0.75;
  double rel_change_tol = 1e-4;
  std::uint64_t seed = 0;
};

struct TraceRow {
  std::size_t evaluation = 0;
  std::vector<double> h;
  double objective = 0.0;
  double radius = 0.0;
  bool accepted = false;
};

struct OptimizeResult {
  Bandwidth best;
  double objective = std::numeric_limits<double>::infinity();
  std::vector<TraceRow> trace;
};

namespace detail {

/// Seeded scrambled Halton points in [0,1)^d (one shared index counter, so
/// successive draws keep filling space across trust-region batches).
class ScrambledHalton {
 public:
  ScrambledHalton(std::size_t dim, std::uint64_t seed) {
    static constexpr int kPrimes[] = {2, 3, 5, 7, 11, 13};
    for (std::size_t k = 0; k < dim; ++k) {
      const int base = kPrimes[k % (sizeof(kPrimes) / sizeof(kPrimes[0]))];
      std::vector<int> perm(static_cast<std::size_t>(base));
      std::iota(perm.begin(), perm.end(), 0);
      RandomStream rng = RandomStream::substream(seed, k + 1);
      for (std::size_t j = perm.size() - 1; j > 0; --j) {
        const auto pick = static_cast<std::size_t>(rng.uniform() * static_cast<double>(j + 1));
        std::swap(perm[j], perm[std::min(pick, j)]);
      }
      bases_.push_back(base);
      perms_.push_back(std::move(perm));
    }
  }

  std::vector<double> next() {
    ++index_;
    std::vector<double> u(bases_.size());
    for (std::size_t k = 0; k < bases_.size(); ++k) {
      const int b = bases_[k];
      std::uint64_t i = index_;
      double f = 1.0, x = 0.0;
      while (i > 0) {
        f /= static_cast<double>(b);
        x += f * static_cast<double>(perms_[k][static_cast<std::size_t>(i % static_cast<std::uint64_t>(b))]);
        i /= static_cast<std::uint64_t>(b);
      }
      u[k] = x;
    }
    return u;
  }

 private:
  std::vector<int> bases_;
  std::vector<std::vector<int>> perms_;
  std::uint64_t index_ = 0;
};

/// Minimizes g.p + p'Hp/2 over the ball |p| <= radius (bisection on the
/// Levenberg parameter when the Newton step leaves the region).
inline Eigen::VectorXd trust_region_step(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                                         double radius) {
  const Eigen::Index d = g.size();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
  const Eigen::VectorXd evals = es.eigenvalues();
  const Eigen::MatrixXd V = es.eigenvectors();
  const Eigen::VectorXd gt = V.transpose() * g;

  const auto step_norm = [&](double mu) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < d; ++k) {
      const double denom = evals[k] + mu;
      s += (gt[k] / denom) * (gt[k] / denom);
    }
    return std::sqrt(s);
  };

  const double lam_min = evals.minCoeff();
  if (lam_min > 0.0) {
    if (step_norm(0.0) <= radius) {
      Eigen::VectorXd p(d);
      for (Eigen::Index k = 0; k < d; ++k) p[k] = -gt[k] / evals[k];
      return V * p;
    }
  }

  // Boundary solution: find mu > max(0, -lam_min) with |p(mu)| = radius.
  double lo = std::max(0.0, -lam_min) + 1e-12;
  if (step_norm(lo) <= radius) {
    // Hard case: the gradient barely excites the most negative direction.
    Eigen::VectorXd p(d);
    for (Eigen::Index k = 0; k < d; ++k) p[k] = -gt[k] / (evals[k] + lo);
    double tau = std::sqrt(std::max(0.0, radius * radius - p.squaredNorm()));
    p[0] += tau;  // eigen-coordinates: first column is the most negative direction
    return V * p;
  }
  double hi = lo + 1.0;
  while (step_norm(hi) > radius && hi < 1e12) hi = hi * 2.0 + 1.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (step_norm(mid) > radius ? lo : hi) = mid;
  }
  const double mu = 0.5 * (lo + hi);
  Eigen::VectorXd p(d);
  for (Eigen::Index k = 0; k < d; ++k) p[k] = -gt[k] / (evals[k] + mu);
  return V * p;
}

}  // namespace detail

/**
 * @brief Derivative-free trust-region search over log-bandwidths.
 *
 * Each round evaluates seeded space-filling points inside the region, fits a
 * full quadratic by least squares, steps to the model minimizer within the
 * region, and accepts or rejects by the actual-versus-predicted reduction
 * ratio. Returns the best point actually evaluated. Objective failures
 * (BandwidthTooSmall or other numeric errors) count as +infinity.
 */
inline OptimizeResult optimize_bandwidth(const std::function<double(const Bandwidth&)>& objective,
                                         const Bandwidth& h0, const std::vector<double>& extents,
                                         const OptimizeOptions& opts = {}) {
  const std::size_t d = h0.dim();
  if (d == 0 || d != extents.size())
    throw err::invalid_argument("bandwidth/extent dimension mismatch");
  const std::size_t n_quad = 1 + d + d * (d + 1) / 2;
  if (opts.budget < n_quad + 1)
    throw err::invalid_argument("optimizer budget " + std::to_string(opts.budget) +
                                " is below the quadratic-fit minimum " + std::to_string(n_quad + 1));

  std::vector<double> cap(d);
  for (std::size_t k = 0; k < d; ++k) {
    if (!(extents[k] > 0.0)) throw err::invalid_argument("nonpositive axis extent");
    cap[k] = std::log(extents[k]);
  }

  OptimizeResult res;
  std::vector<Eigen::VectorXd> xs;
  std::vector<double> fs;

  const auto clamp_point = [&](Eigen::VectorXd x) {
    for (std::size_t k = 0; k < d; ++k) x[static_cast<Eigen::Index>(k)] =
        std::min(x[static_cast<Eigen::Index>(k)], cap[k]);
    return x;
  };
  const auto evaluate = [&](const Eigen::VectorXd& x, double radius, bool accepted) {
    Bandwidth h;
    h.h.resize(d);
    for (std::size_t k = 0; k < d; ++k) h.h[k] = std::exp(x[static_cast<Eigen::Index>(k)]);
    double f = std::numeric_limits<double>::infinity();
    try {
      f = objective(h);
      if (!std::isfinite(f)) f = std::numeric_limits<double>::infinity();
    } catch (const Error&) {
      f = std::numeric_limits<double>::infinity();
    }
    xs.push_back(x);
    fs.push_back(f);
    res.trace.push_back({res.trace.size(), h.h, f, radius, accepted});
    if (f < res.objective) {
      res.objective = f;
      res.best = h;
    }
    return f;
  };

  Eigen::VectorXd center(static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < d; ++k) {
    if (!(h0[k] > 0.0)) throw err::invalid_bandwidth("starting bandwidth must be positive");
    center[static_cast<Eigen::Index>(k)] = std::log(h0[k]);
  }
  center = clamp_point(center);

  double radius = opts.initial_radius;
  detail::ScrambledHalton halton(d, opts.seed);
  double f_center = evaluate(center, radius, true);

  while (xs.size() < opts.budget && radius >= opts.radius_min) {
    // Gather region points (center excluded), topping up with new draws.
    std::vector<std::size_t> in_region;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if ((xs[i] - center).lpNorm<Eigen::Infinity>() <= radius * (1.0 + 1e-12))
        in_region.push_back(i);
    }
    while (in_region.size() < n_quad + 2 && xs.size() < opts.budget) {
      const auto u = halton.next();
      Eigen::VectorXd x(static_cast<Eigen::Index>(d));
      for (std::size_t k = 0; k < d; ++k)
        x[static_cast<Eigen::Index>(k)] = center[static_cast<Eigen::Index>(k)] +
                                          radius * (2.0 * u[k] - 1.0);
      x = clamp_point(x);
      evaluate(x, radius, false);
      in_region.push_back(xs.size() - 1);
    }
    if (in_region.size() < n_quad || xs.size() >= opts.budget) break;

    // Full quadratic least-squares fit on centered coordinates.
    const auto m = static_cast<Eigen::Index>(in_region.size());
    Eigen::MatrixXd X(m, static_cast<Eigen::Index>(n_quad));
    Eigen::VectorXd y(m);
    bool finite = true;
    for (Eigen::Index r = 0; r < m; ++r) {
      const Eigen::VectorXd z = xs[in_region[static_cast<std::size_t>(r)]] - center;
      Eigen::Index c = 0;
      X(r, c++) = 1.0;
      for (std::size_t k = 0; k < d; ++k) X(r, c++) = z[static_cast<Eigen::Index>(k)];
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t l = k; l < d; ++l)
          X(r, c++) = z[static_cast<Eigen::Index>(k)] * z[static_cast<Eigen::Index>(l)];
      const double fv = fs[in_region[static_cast<std::size_t>(r)]];
      if (!std::isfinite(fv)) finite = false;
      y[r] = fv;
    }
    if (!finite) {
      // Infinite values poison the regression; pull in and retry.
      radius *= 0.5;
      continue;
    }
    const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(y);

    Eigen::VectorXd g(static_cast<Eigen::Index>(d));
    Eigen::MatrixXd H(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    {
      Eigen::Index c = 1;
      for (std::size_t k = 0; k < d; ++k) g[static_cast<Eigen::Index>(k)] = beta[c++];
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t l = k; l < d; ++l) {
          const double v = beta[c++];
          if (k == l) {
            H(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)) = 2.0 * v;
          } else {
            H(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) = v;
            H(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = v;
          }
        }
    }

    const Eigen::VectorXd step = detail::trust_region_step(H, g, radius);
    const double predicted = -(g.dot(step) + 0.5 * step.dot(H * step));
    if (!(predicted > 0.0) || step.norm() < 1e-14) {
      radius *= 0.5;
      continue;
    }
    const Eigen::VectorXd x_plus = clamp_point(center + step);
    const double f_plus = evaluate(x_plus, radius, false);
    const double rho = (f_center - f_plus) / predicted;

    if (rho > opts.accept_ratio) {
      const double drop = f_center - f_plus;
      res.trace.back().accepted = true;
      center = x_plus;
      f_center = f_plus;
      if (rho > opts.expand_ratio) radius = std::min(radius * 2.0, opts.radius_max);
      if (drop < opts.rel_change_tol * std::max(1.0, std::abs(f_center))) break;
    } else {
      radius *= 0.5;
    }
  }
  return res;
}

/** @brief Convenience overload: optimizes a CV objective from its own extents. */
inline OptimizeResult optimize_bandwidth(const CvObjective& obj, const Bandwidth& h0,
                                         const OptimizeOptions& opts = {}) {
  return optimize_bandwidth([&obj](const Bandwidth& h) { return obj(h); }, h0, obj.extents(), opts);
}

}  // namespace dfpca
