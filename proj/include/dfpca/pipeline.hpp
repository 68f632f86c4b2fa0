#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dfpca/bandwidth.hpp"
#include "dfpca/binning.hpp"
#include "dfpca/dataset.hpp"
#include "dfpca/eigensolve.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/fft_smoother.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/scores.hpp"
#include "dfpca/smoother.hpp"
#include "dfpca/surface.hpp"

// End-to-end orchestration: resolve the grid and bandwidths, smooth the mean,
// diagonal, and covariance surfaces, extract eigenpairs, select components by
// FVE, and score every sample. The CLI is a thin shell over this module.

namespace dfpca {

enum class BandwidthMode { Explicit, RuleOfThumb, CrossValidated };

/// Exactly one way to pick a bandwidth per estimator: explicit per-axis
/// values, the rule of thumb, or cross-validation; auto modes are scaled by
/// the multiplier and clamped to the axis extent.
struct BandwidthChoice {
  BandwidthMode mode = BandwidthMode::RuleOfThumb;
  std::vector<double> values;
  double multiplier = 1.0;
};

enum class EigMethod { Dense, Randomized };

inline EigMethod parse_eig_method(const std::string& s) {
  if (s == "dense") return EigMethod::Dense;
  if (s == "randomized") return EigMethod::Randomized;
  throw err::invalid_argument("unknown eigensolver '" + s + "' (expected dense|randomized)");
}

/** @brief Resolved settings for one fit run. */
struct RunConfig {
  std::vector<Index> grid_nodes = {101};  // per axis; single entry replicates

  BandwidthChoice bw_mean;
  BandwidthChoice bw_cov;
  BandwidthChoice bw_diag;
  std::size_t cv_budget = 40;
  std::size_t cv_max_units = 2000;

  double fve_threshold = 0.95;
  std::size_t max_components = 20;
  EigMethod eig_method = EigMethod::Dense;
  std::size_t sketch = 0;  // randomized sketch columns; 0 picks the default

  ScoreMethod score_method = ScoreMethod::Pace;
  bool score_auto = true;

  bool use_fft = true;
  Index n_blocks = 0;  // 0 sizes the plan from the memory budget
  double memory_budget_mb = 1024.0;
  std::uint64_t seed = 20260815;
  int threads = 1;

  void validate() const {
    if (grid_nodes.empty()) throw err::invalid_argument("grid needs at least one node count");
    for (Index n : grid_nodes)
      if (n < 2) throw err::invalid_argument("grid axes need at least two nodes");
    if (!(fve_threshold > 0.0) || fve_threshold > 1.0)
      throw err::invalid_argument("FVE threshold must lie in (0, 1]");
    if (max_components == 0) throw err::invalid_argument("component cap must be positive");
    if (!(memory_budget_mb > 0.0)) throw err::invalid_argument("memory budget must be positive");
    for (const BandwidthChoice* c : {&bw_mean, &bw_cov, &bw_diag}) {
      if (c->mode == BandwidthMode::Explicit && c->values.empty())
        throw err::invalid_argument("explicit bandwidth mode needs per-axis values");
      if (c->mode != BandwidthMode::Explicit && !c->values.empty())
        throw err::invalid_argument("bandwidth values given but mode is automatic");
      if (!(c->multiplier > 0.0)) throw err::invalid_argument("bandwidth multiplier must be positive");
    }
    if (n_blocks < 0) throw err::invalid_argument("block count cannot be negative");
  }
};

struct StageTime {
  std::string stage;
  double seconds = 0.0;
};

/** @brief Human-readable summary of one fit. */
struct FitReport {
  std::size_t n_samples = 0;
  std::size_t n_obs = 0;
  std::size_t dim = 0;
  Index grid_size = 0;
  Bandwidth h_mean, h_cov, h_diag;
  double sigma2 = 0.0;
  std::vector<double> eigenvalues;
  std::vector<double> fve;
  double total_variance = 0.0;
  std::size_t n_components = 0;
  ScoreMethod score_method = ScoreMethod::Pace;
  std::size_t sparse_score_warnings = 0;
  Index blocks_used = 1;
  std::vector<StageTime> timings;

  std::string render() const {
    std::ostringstream out;
    out << "samples:          " << n_samples << " (" << n_obs << " observations, dim " << dim
        << ")\n";
    out << "grid nodes:       " << grid_size << "\n";
    auto bw_line = [&out](const char* label, const Bandwidth& h) {
      out << label;
      for (std::size_t k = 0; k < h.dim(); ++k) out << (k ? " " : "") << h[k];
      out << "\n";
    };
    bw_line("mean bandwidth:   ", h_mean);
    bw_line("cov bandwidth:    ", h_cov);
    bw_line("diag bandwidth:   ", h_diag);
    out << "noise variance:   " << sigma2 << "\n";
    out << "components:       " << n_components << " of " << eigenvalues.size()
        << " retained\n";
    out << "total variance:   " << total_variance << "\n";
    for (std::size_t l = 0; l < eigenvalues.size(); ++l)
      out << "  lambda_" << l + 1 << " = " << eigenvalues[l] << "  (FVE " << fve[l] << ")\n";
    out << "score method:     " << score_method_name(score_method) << "\n";
    if (sparse_score_warnings > 0)
      out << "sparse-score warnings: " << sparse_score_warnings << "\n";
    out << "blocks:           " << blocks_used << "\n";
    for (const auto& t : timings) out << "  " << t.stage << ": " << t.seconds << " s\n";
    return out.str();
  }
};

namespace detail {

class StageClock {
 public:
  explicit StageClock(std::vector<StageTime>& sink) : sink_(sink) {}
  template <typename F>
  auto run(const std::string& stage, F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      record(stage, t0);
    } else {
      auto result = fn();
      record(stage, t0);
      return result;
    }
  }

 private:
  void record(const std::string& stage, std::chrono::steady_clock::time_point t0) {
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    sink_.push_back({stage, dt.count()});
  }
  std::vector<StageTime>& sink_;
};

inline Bandwidth clamp_to_extents(Bandwidth h, const std::vector<double>& extents) {
  for (std::size_t k = 0; k < h.dim(); ++k) h.h[k] = std::min(h.h[k], extents[k]);
  return h;
}

inline Bandwidth resolve_bandwidth(const BandwidthChoice& choice, const FunctionalDataset& data,
                                   const EvaluationGrid& grid, CvTarget target,
                                   const RunConfig& cfg) {
  std::vector<double> extents(grid.dim());
  for (std::size_t k = 0; k < grid.dim(); ++k) extents[k] = grid.hull_hi(k) - grid.hull_lo(k);

  if (choice.mode == BandwidthMode::Explicit) {
    Bandwidth h{choice.values};
    h.validate(grid);
    return h;
  }

  Bandwidth h = rule_of_thumb_bandwidth(data, extents);
  if (choice.mode == BandwidthMode::CrossValidated) {
    CvObjective objective(data, grid, target, {cfg.cv_max_units, cfg.seed});
    OptimizeOptions opts;
    opts.budget = cfg.cv_budget;
    opts.seed = cfg.seed;
    h = optimize_bandwidth(objective, h, opts).best;
  }
  for (double& v : h.h) v *= choice.multiplier;
  return clamp_to_extents(std::move(h), extents);
}

/// Estimated working-set bytes of the blocked covariance smoother: moment
/// stacks over one (s, t) core pair plus the two halo-padded input grids.
inline double covariance_block_bytes(const EvaluationGrid& grid, const Bandwidth& h,
                                     Index n_blocks) {
  const std::size_t d = grid.dim();
  const MomentBasis basis(2 * d);
  double core_nodes = 1.0, in_nodes = 1.0;
  for (std::size_t k = 0; k < d; ++k) {
    const auto shape = static_cast<double>(grid.shape()[k]);
    const auto halo = static_cast<double>(kernel_radius_nodes(h[k], grid.spacing(k)));
    double core = shape;
    if (k == 0) core = std::ceil(shape / static_cast<double>(n_blocks));
    core_nodes *= core * core;
    const double in_ext = std::min(shape, core + 2.0 * halo);
    in_nodes *= in_ext * in_ext;
  }
  const auto stacks = static_cast<double>(basis.count() + basis.count_linear());
  return (stacks * core_nodes + 2.0 * in_nodes) * 8.0;
}

inline BlockPlan auto_block_plan(const EvaluationGrid& grid, const Bandwidth& h,
                                 const RunConfig& cfg) {
  if (cfg.n_blocks > 0) return make_block_plan(grid, h, cfg.n_blocks);
  const double budget = cfg.memory_budget_mb * 1024.0 * 1024.0;
  Index blocks = 1;
  while (covariance_block_bytes(grid, h, blocks) > budget && blocks < grid.shape()[0])
    blocks *= 2;
  // Back off until the plan is legal (cores must stay at least one halo wide).
  for (; blocks > 1; blocks /= 2) {
    try {
      BlockPlan plan = make_block_plan(grid, h, blocks);
      validate_block_plan(plan, grid, h);
      return plan;
    } catch (const Error&) {
      continue;
    }
  }
  return single_block_plan(grid, h);
}

inline void truncate_components(EigenSystem& eig, std::size_t L) {
  if (L >= eig.eigenvalues.size()) return;
  eig.eigenvalues.resize(L);
  eig.eigenfunctions.resize(L);
  eig.fve.resize(L);
}

}  // namespace detail

/**
 * @brief Builds the evaluation grid for a fit: the override (for example a
 * grid/mask file) when present, otherwise a uniform grid spanning the data's
 * bounding box with the configured node counts.
 */
inline EvaluationGrid resolve_grid(const FunctionalDataset& data, const RunConfig& cfg,
                                   const std::optional<EvaluationGrid>& grid_override) {
  if (grid_override) {
    if (grid_override->dim() != data.dim)
      throw err::invalid_argument("grid file dimension differs from the data");
    return *grid_override;
  }
  if (data.samples.empty()) throw err::invalid_argument("cannot fit an empty dataset");
  std::vector<Index> nodes = cfg.grid_nodes;
  if (nodes.size() == 1 && data.dim > 1) nodes.assign(data.dim, nodes[0]);
  if (nodes.size() != data.dim)
    throw err::invalid_argument("grid node counts do not match the data dimension");
  const BoundingBox box = data.bounding_box();
  for (std::size_t k = 0; k < data.dim; ++k)
    if (!(box.hi[k] > box.lo[k]))
      throw err::degenerate_axis("data axis " + std::to_string(k) + " has zero extent");
  return EvaluationGrid::uniform(box.lo, box.hi, nodes);
}

/**
 * @brief Full fit: surfaces, noise, eigenpairs, FVE selection, and scores.
 *
 * Stages are timed individually; the binned FFT path is used unless
 * configured off, with a block plan sized to the memory budget.
 */
inline std::pair<FpcaModel, FitReport> fit_pipeline(
    const FunctionalDataset& data, const RunConfig& cfg,
    const std::optional<EvaluationGrid>& grid_override = std::nullopt) {
  cfg.validate();
  if (data.samples.empty()) throw err::invalid_argument("cannot fit an empty dataset");
  for (const Sample& s : data.samples)
    if (s.n_obs() == 0) throw err::invalid_argument("sample '" + s.id + "' has no observations");

  FitReport report;
  detail::StageClock clock(report.timings);
  report.n_samples = data.n_samples();
  report.n_obs = data.n_obs();
  report.dim = data.dim;

  const EvaluationGrid grid =
      clock.run("grid", [&] { return resolve_grid(data, cfg, grid_override); });
  report.grid_size = grid.size();

  const Bandwidth h_mean = clock.run("bandwidth.mean", [&] {
    return detail::resolve_bandwidth(cfg.bw_mean, data, grid, CvTarget::Mean, cfg);
  });
  const Bandwidth h_cov = clock.run("bandwidth.covariance", [&] {
    return detail::resolve_bandwidth(cfg.bw_cov, data, grid, CvTarget::Covariance, cfg);
  });
  const Bandwidth h_diag = clock.run("bandwidth.diagonal", [&] {
    return detail::resolve_bandwidth(cfg.bw_diag, data, grid, CvTarget::DiagPlusNoise, cfg);
  });
  report.h_mean = h_mean;
  report.h_cov = h_cov;
  report.h_diag = h_diag;

  SurfaceEstimate mean, diag, cov;
  if (cfg.use_fft) {
    const BinnedData binned = clock.run("binning", [&] {
      return linear_bin(data, grid, {/*mean_path=*/true, /*covariance_path=*/true});
    });
    mean = clock.run("mean", [&] {
      return fft_local_linear(binned, grid, h_mean, MomentTarget::Mean,
                              detail::auto_block_plan(grid, h_mean, cfg));
    });
    diag = clock.run("diagonal", [&] {
      return fft_local_linear(binned, grid, h_diag, MomentTarget::Squares,
                              detail::auto_block_plan(grid, h_diag, cfg));
    });
    const BlockPlan cov_plan = detail::auto_block_plan(grid, h_cov, cfg);
    report.blocks_used = static_cast<Index>(cov_plan.blocks.size());
    cov = clock.run("covariance",
                    [&] { return fft_covariance(binned, grid, h_cov, mean, cov_plan); });
  } else {
    mean = clock.run("mean", [&] { return estimate_mean(data, grid, h_mean); });
    diag = clock.run("diagonal", [&] { return estimate_diag_plus_noise(data, grid, h_diag); });
    cov = clock.run("covariance", [&] { return estimate_covariance(data, grid, h_cov, mean); });
  }

  const double sigma2 = clock.run("noise", [&] { return estimate_sigma2(diag, cov, mean); });
  report.sigma2 = sigma2;

  EigenSystem eig = clock.run("eigen", [&] {
    const std::size_t budget_bytes =
        static_cast<std::size_t>(cfg.memory_budget_mb * 1024.0 * 1024.0);
    const MatrixizedCovariance S = matrixize(cov, budget_bytes);
    const std::size_t L_max = std::min(cfg.max_components, static_cast<std::size_t>(S.m));
    if (cfg.eig_method == EigMethod::Dense) return dense_eig(S, L_max, grid);
    const std::size_t q = cfg.sketch > 0 ? cfg.sketch : default_sketch_size(L_max, S.m);
    return randomized_eig(S, q, L_max, grid, cfg.seed);
  });
  const std::size_t L = select_components_fve(eig, cfg.fve_threshold);
  detail::truncate_components(eig, L);

  FpcaModel model;
  model.mean = std::move(mean);
  model.eig = std::move(eig);
  model.sigma2 = sigma2;
  model.mean_bandwidth = h_mean;
  model.cov_bandwidth = h_cov;
  model.diag_bandwidth = h_diag;
  model.fve_threshold = cfg.fve_threshold;
  model.seed = cfg.seed;
  model.score_method =
      cfg.score_auto ? choose_score_method(data, grid) : cfg.score_method;

  clock.run("scores", [&] {
    model.scores.resize(data.n_samples());
    model.sample_ids.resize(data.n_samples());
    for (std::size_t i = 0; i < data.n_samples(); ++i) {
      bool sparse = false;
      model.scores[i] = compute_scores(data.samples[i], model, model.score_method, &sparse);
      model.sample_ids[i] = data.samples[i].id;
      if (sparse) ++report.sparse_score_warnings;
    }
  });

  report.eigenvalues = model.eig.eigenvalues;
  report.fve = model.eig.fve;
  report.total_variance = model.eig.total_variance;
  report.n_components = model.n_components();
  report.score_method = model.score_method;
  model.validate();
  return {std::move(model), std::move(report)};
}

/** @brief One reconstructed observation of a query sample. */
struct PredictionRow {
  std::string sample_id;
  std::vector<double> coord;
  double observed = 0.0;
  double predicted = 0.0;
  double squared_error = 0.0;
};

struct PredictResult {
  std::vector<PredictionRow> rows;
  std::vector<std::string> sample_ids;
  std::vector<std::vector<double>> scores;
  double mean_squared_error = 0.0;
};

/**
 * @brief Scores query samples against a frozen model and reconstructs each
 * queried coordinate. Coordinates outside the model grid raise OutOfDomain.
 */
inline PredictResult predict_samples(const FpcaModel& model, const FunctionalDataset& queries,
                                     std::optional<ScoreMethod> method = std::nullopt) {
  if (queries.dim != model.grid().dim())
    throw err::invalid_argument("query dimension differs from the model");
  const ScoreMethod m = method.value_or(model.score_method);

  PredictResult out;
  double total = 0.0;
  std::size_t count = 0;
  for (const Sample& s : queries.samples) {
    const std::vector<double> a = compute_scores(s, model, m);
    out.sample_ids.push_back(s.id);
    out.scores.push_back(a);
    for (std::size_t j = 0; j < s.n_obs(); ++j) {
      PredictionRow row;
      row.sample_id = s.id;
      row.coord.assign(s.coord(j, queries.dim), s.coord(j, queries.dim) + queries.dim);
      row.observed = s.values[j];
      row.predicted = reconstruct_at(model, a, row.coord.data());
      if (is_outside(row.predicted))
        throw err::out_of_domain("query coordinate of sample '" + s.id +
                                 "' lies outside the model grid");
      row.squared_error = (row.observed - row.predicted) * (row.observed - row.predicted);
      total += row.squared_error;
      ++count;
      out.rows.push_back(std::move(row));
    }
  }
  out.mean_squared_error = count ? total / static_cast<double>(count) : 0.0;
  return out;
}

}  // namespace dfpca
