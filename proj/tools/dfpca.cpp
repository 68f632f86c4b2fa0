// Command-line driver: fit, predict, simulate, bandwidth, and eig-diag
// subcommands over the header-only library. Every error maps to a stable
// exit code: 1 usage, 2 parse, 3 config, 4 numeric, 5 version.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dfpca/dfpca.hpp"

namespace {

using dfpca::Index;

dfpca::BandwidthChoice parse_bandwidth_choice(const std::string& text, double multiplier) {
  dfpca::BandwidthChoice choice;
  choice.multiplier = multiplier;
  if (text == "auto") {
    choice.mode = dfpca::BandwidthMode::RuleOfThumb;
    return choice;
  }
  if (text == "cv") {
    choice.mode = dfpca::BandwidthMode::CrossValidated;
    return choice;
  }
  choice.mode = dfpca::BandwidthMode::Explicit;
  choice.multiplier = 1.0;
  std::string::size_type pos = 0;
  while (pos <= text.size()) {
    const auto next = text.find(',', pos);
    const std::string tok = text.substr(pos, next == std::string::npos ? next : next - pos);
    try {
      std::size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      choice.values.push_back(v);
    } catch (const std::exception&) {
      throw dfpca::err::invalid_argument("bandwidth '" + text +
                                         "' is not auto, cv, or a comma-separated number list");
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return choice;
}

std::string format_g(double v) { return dfpca::detail::format_double(v); }

/// Options shared by every subcommand that fits surfaces from a data file.
struct SurfaceArgs {
  std::string input;
  std::string grid_file;
  std::vector<Index> grid_nodes = {101};
  std::string bw_mean = "auto";
  std::string bw_cov = "auto";
  std::string bw_diag = "auto";
  double bw_multiplier = 1.0;
  std::size_t cv_budget = 40;
  std::size_t cv_max_units = 2000;
  bool no_fft = false;
  Index blocks = 0;
  double memory_mb = 1024.0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--input", input, "Long-format observation file")->required();
    cmd->add_option("--grid", grid_nodes,
                    "Grid nodes per axis (one value replicates across axes)")
        ->delimiter(',');
    cmd->add_option("--grid-file", grid_file, "dfpca-grid file fixing the grid (and mask)");
    cmd->add_option("--bw-mean", bw_mean, "Mean bandwidth: auto, cv, or values h1,h2,...");
    cmd->add_option("--bw-cov", bw_cov, "Covariance bandwidth: auto, cv, or values");
    cmd->add_option("--bw-diag", bw_diag, "Diagonal bandwidth: auto, cv, or values");
    cmd->add_option("--bw-multiplier", bw_multiplier, "Scales automatic bandwidths");
    cmd->add_option("--cv-budget", cv_budget, "Objective evaluations for cv bandwidths");
    cmd->add_option("--cv-max-units", cv_max_units, "Cross-validation unit cap");
    cmd->add_flag("--no-fft", no_fft, "Use the direct smoother instead of the binned FFT path");
    cmd->add_option("--blocks", blocks, "Covariance block count (0 = auto from memory budget)");
    cmd->add_option("--memory-mb", memory_mb, "Memory budget for block planning, in MiB");
  }

  void fill(dfpca::RunConfig& cfg) const {
    cfg.grid_nodes = grid_nodes;
    cfg.bw_mean = parse_bandwidth_choice(bw_mean, bw_multiplier);
    cfg.bw_cov = parse_bandwidth_choice(bw_cov, bw_multiplier);
    cfg.bw_diag = parse_bandwidth_choice(bw_diag, bw_multiplier);
    cfg.cv_budget = cv_budget;
    cfg.cv_max_units = cv_max_units;
    cfg.use_fft = !no_fft;
    cfg.n_blocks = blocks;
    cfg.memory_budget_mb = memory_mb;
  }

  std::optional<dfpca::EvaluationGrid> load_grid() const {
    if (grid_file.empty()) return std::nullopt;
    return dfpca::read_grid(grid_file);
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw dfpca::err::io("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw dfpca::err::io("failed writing '" + path + "'");
}

// ---------------------------------------------------------------- fit -----

struct FitArgs {
  SurfaceArgs surface;
  std::string output = "dfpca-model";
  double fve = 0.95;
  std::size_t max_components = 20;
  std::string eig = "dense";
  std::size_t sketch = 0;
  std::string score = "auto";
};

int run_fit(const FitArgs& args, std::uint64_t seed, const std::string& resolved_config) {
  dfpca::RunConfig cfg;
  args.surface.fill(cfg);
  cfg.fve_threshold = args.fve;
  cfg.max_components = args.max_components;
  cfg.eig_method = dfpca::parse_eig_method(args.eig);
  cfg.sketch = args.sketch;
  cfg.seed = seed;
  if (args.score == "auto") {
    cfg.score_auto = true;
  } else {
    cfg.score_auto = false;
    cfg.score_method = dfpca::parse_score_method(args.score);
  }

  const dfpca::FunctionalDataset data = dfpca::read_long_format(args.surface.input);
  auto [model, report] = dfpca::fit_pipeline(data, cfg, args.surface.load_grid());

  dfpca::save_model(model, args.output);
  const auto path = [&](const char* name) {
    return (std::filesystem::path(args.output) / name).string();
  };
  write_text(path("report.txt"), report.render());
  write_text(path("run_config.ini"), resolved_config);
  std::cout << report.render();
  std::cout << "model bundle:     " << args.output << "\n";
  return 0;
}

// ------------------------------------------------------------- predict ----

struct PredictArgs {
  std::string model;
  std::string input;
  std::string output = "predictions.tsv";
  std::string scores_output;
  std::string method = "model";
};

int run_predict(const PredictArgs& args) {
  const dfpca::FpcaModel model = dfpca::load_model(args.model);
  const dfpca::FunctionalDataset queries = dfpca::read_long_format(args.input);
  std::optional<dfpca::ScoreMethod> method;
  if (args.method != "model") method = dfpca::parse_score_method(args.method);

  const dfpca::PredictResult result = dfpca::predict_samples(model, queries, method);

  std::ofstream out(args.output);
  if (!out) throw dfpca::err::io("cannot open '" + args.output + "' for writing");
  out << "sample_id";
  for (std::size_t k = 0; k < queries.dim; ++k) out << "\tt" << k + 1;
  out << "\ty\tprediction\tsquared_error\n";
  for (const auto& row : result.rows) {
    out << row.sample_id;
    for (double c : row.coord) out << '\t' << format_g(c);
    out << '\t' << format_g(row.observed) << '\t' << format_g(row.predicted) << '\t'
        << format_g(row.squared_error) << '\n';
  }
  if (!out) throw dfpca::err::io("failed writing '" + args.output + "'");

  if (!args.scores_output.empty()) {
    std::ofstream sout(args.scores_output);
    if (!sout) throw dfpca::err::io("cannot open '" + args.scores_output + "' for writing");
    sout << "sample_id";
    for (std::size_t l = 1; l <= model.n_components(); ++l) sout << "\tA_" << l;
    sout << '\n';
    for (std::size_t i = 0; i < result.scores.size(); ++i) {
      sout << result.sample_ids[i];
      for (double a : result.scores[i]) sout << '\t' << format_g(a);
      sout << '\n';
    }
    if (!sout) throw dfpca::err::io("failed writing '" + args.scores_output + "'");
  }

  std::cout << "query samples:      " << result.scores.size() << "\n";
  std::cout << "predicted rows:     " << result.rows.size() << "\n";
  std::cout << "mean squared error: " << result.mean_squared_error << "\n";
  std::cout << "predictions:        " << args.output << "\n";
  return 0;
}

// ------------------------------------------------------------ simulate ----

struct SimulateArgs {
  std::string model = "sim1";
  std::size_t n = 100;
  std::size_t points = 1000;
  Index grid = 0;  // 0 keeps the model default
  std::size_t runs = 1;
  std::string output = "dfpca-sim";
};

int run_simulate(const SimulateArgs& args, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(args.output);
  const auto path = [&](const std::string& name) { return (fs::path(args.output) / name).string(); };

  auto make_spec = [&](std::uint64_t run_seed) {
    if (args.model == "sim1")
      return dfpca::sim1_spec(args.n, args.points, args.grid > 0 ? args.grid : 400, run_seed);
    if (args.model == "sim2")
      return dfpca::sim2_spec(args.n, args.grid > 0 ? args.grid : 16, run_seed);
    throw dfpca::err::invalid_argument("unknown simulation model '" + args.model +
                                       "' (expected sim1|sim2)");
  };

  // Shared truth surfaces (identical across runs).
  {
    const dfpca::SimSpec spec = make_spec(seed);
    dfpca::write_grid(path("truth_grid.txt"), spec.grid);
    dfpca::SimSpec probe = spec;
    probe.n = 1;
    probe.store_grid_truth = true;
    auto [probe_data, truth] = dfpca::generate(probe);
    (void)probe_data;
    dfpca::detail::write_value_column(path("truth_mean.tsv"), truth.mean_on_grid);
    std::vector<std::vector<double>> rows(truth.mean_on_grid.size(),
                                          std::vector<double>(truth.phi_on_grid.size()));
    for (std::size_t l = 0; l < truth.phi_on_grid.size(); ++l)
      for (std::size_t f = 0; f < truth.mean_on_grid.size(); ++f)
        rows[f][l] = truth.phi_on_grid[l][f];
    dfpca::detail::write_matrix(path("truth_eigenfunctions.tsv"), rows);
  }

  std::ostringstream summary;
  summary << "run\tseed";
  {
    const dfpca::SimSpec spec = make_spec(seed);
    for (std::size_t l = 1; l <= spec.lambda.size(); ++l) summary << "\tvar_A" << l;
  }
  summary << "\tnoise_var\n";

  for (std::size_t r = 0; r < args.runs; ++r) {
    const std::uint64_t run_seed = seed + r;
    dfpca::SimSpec spec = make_spec(run_seed);
    spec.store_grid_truth = false;
    auto [data, truth] = dfpca::generate(spec);

    const std::string tag = args.runs > 1 ? "_run" + std::to_string(r) : "";
    dfpca::write_long_format(path("data" + tag + ".tsv"), data);
    {
      std::ofstream out(path("truth_scores" + tag + ".tsv"));
      if (!out) throw dfpca::err::io("cannot write truth scores");
      out << "sample_id";
      for (std::size_t l = 1; l <= spec.lambda.size(); ++l) out << "\tA_" << l;
      out << '\n';
      for (std::size_t i = 0; i < data.n_samples(); ++i) {
        out << data.samples[i].id;
        for (double a : truth.scores[i]) out << '\t' << format_g(a);
        out << '\n';
      }
    }

    summary << r << '\t' << run_seed;
    const std::size_t L = spec.lambda.size();
    for (std::size_t l = 0; l < L; ++l) {
      double m = 0.0, s2 = 0.0;
      for (const auto& a : truth.scores) m += a[l];
      m /= static_cast<double>(truth.scores.size());
      for (const auto& a : truth.scores) s2 += (a[l] - m) * (a[l] - m);
      s2 /= static_cast<double>(truth.scores.size() - 1);
      summary << '\t' << format_g(s2);
    }
    double noise = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < data.n_samples(); ++i)
      for (std::size_t j = 0; j < data.samples[i].n_obs(); ++j) {
        const double e = data.samples[i].values[j] - truth.noiseless[i][j];
        noise += e * e;
        ++count;
      }
    summary << '\t' << format_g(noise / static_cast<double>(count)) << '\n';
  }

  if (args.runs > 1) write_text(path("summary.tsv"), summary.str());
  std::cout << "model:   " << args.model << "\n";
  std::cout << "runs:    " << args.runs << "\n";
  std::cout << "samples: " << args.n << " per run\n";
  std::cout << "output:  " << args.output << "\n";
  return 0;
}

// ------------------------------------------------------------ bandwidth ---

struct BandwidthArgs {
  SurfaceArgs surface;
  std::string target = "mean";
  std::string trace_output;
};

int run_bandwidth(const BandwidthArgs& args, std::uint64_t seed) {
  const dfpca::FunctionalDataset data = dfpca::read_long_format(args.surface.input);

  dfpca::RunConfig cfg;
  args.surface.fill(cfg);
  cfg.seed = seed;
  const dfpca::EvaluationGrid grid = dfpca::resolve_grid(data, cfg, args.surface.load_grid());

  dfpca::CvTarget target;
  if (args.target == "mean") target = dfpca::CvTarget::Mean;
  else if (args.target == "covariance") target = dfpca::CvTarget::Covariance;
  else if (args.target == "diag") target = dfpca::CvTarget::DiagPlusNoise;
  else throw dfpca::err::invalid_argument("unknown target '" + args.target +
                                          "' (expected mean|covariance|diag)");

  std::vector<double> extents(grid.dim());
  for (std::size_t k = 0; k < grid.dim(); ++k)
    extents[k] = grid.hull_hi(k) - grid.hull_lo(k);
  const dfpca::Bandwidth h0 = dfpca::rule_of_thumb_bandwidth(data, extents);

  dfpca::CvObjective objective(data, grid, target, {args.surface.cv_max_units, seed});
  dfpca::OptimizeOptions opts;
  opts.budget = args.surface.cv_budget;
  opts.seed = seed;
  const dfpca::OptimizeResult result = dfpca::optimize_bandwidth(objective, h0, opts);

  std::ostringstream trace;
  trace << "evaluation";
  for (std::size_t k = 1; k <= grid.dim(); ++k) trace << "\th" << k;
  trace << "\tobjective\tradius\taccepted\n";
  for (const auto& row : result.trace) {
    trace << row.evaluation;
    for (std::size_t k = 0; k < grid.dim(); ++k) trace << '\t' << format_g(row.h[k]);
    trace << '\t' << format_g(row.objective) << '\t' << format_g(row.radius) << '\t'
          << (row.accepted ? 1 : 0) << '\n';
  }
  if (!args.trace_output.empty()) write_text(args.trace_output, trace.str());
  else std::cout << trace.str();

  std::cout << "target:    " << args.target << "\n";
  std::cout << "start h:  ";
  for (std::size_t k = 0; k < h0.dim(); ++k) std::cout << ' ' << h0[k];
  std::cout << "\nbest h:   ";
  for (std::size_t k = 0; k < result.best.dim(); ++k) std::cout << ' ' << result.best[k];
  std::cout << "\nobjective: " << result.objective << "\n";
  return 0;
}

// ------------------------------------------------------------- eig-diag ---

struct EigDiagArgs {
  SurfaceArgs surface;
  std::size_t max_components = 10;
  std::size_t sketch = 0;
  std::string output;
};

int run_eig_diag(const EigDiagArgs& args, std::uint64_t seed) {
  const dfpca::FunctionalDataset data = dfpca::read_long_format(args.surface.input);

  dfpca::RunConfig cfg;
  args.surface.fill(cfg);
  cfg.seed = seed;
  const dfpca::EvaluationGrid grid = dfpca::resolve_grid(data, cfg, args.surface.load_grid());

  const dfpca::Bandwidth h_mean =
      dfpca::detail::resolve_bandwidth(cfg.bw_mean, data, grid, dfpca::CvTarget::Mean, cfg);
  const dfpca::Bandwidth h_cov =
      dfpca::detail::resolve_bandwidth(cfg.bw_cov, data, grid, dfpca::CvTarget::Covariance, cfg);

  dfpca::SurfaceEstimate mean, cov;
  if (cfg.use_fft) {
    const dfpca::BinnedData binned =
        dfpca::linear_bin(data, grid, {/*mean_path=*/true, /*covariance_path=*/true});
    mean = dfpca::fft_local_linear(binned, grid, h_mean, dfpca::MomentTarget::Mean,
                                   dfpca::detail::auto_block_plan(grid, h_mean, cfg));
    cov = dfpca::fft_covariance(binned, grid, h_cov, mean,
                                dfpca::detail::auto_block_plan(grid, h_cov, cfg));
  } else {
    mean = dfpca::estimate_mean(data, grid, h_mean);
    cov = dfpca::estimate_covariance(data, grid, h_cov, mean);
  }

  const std::size_t budget_bytes =
      static_cast<std::size_t>(cfg.memory_budget_mb * 1024.0 * 1024.0);
  const dfpca::MatrixizedCovariance S = dfpca::matrixize(cov, budget_bytes);
  const std::size_t L_max = std::min(args.max_components, static_cast<std::size_t>(S.m));
  const std::size_t q =
      args.sketch > 0 ? args.sketch : dfpca::default_sketch_size(L_max, S.m);

  const dfpca::EigenSystem dense = dfpca::dense_eig(S, L_max, grid);
  const dfpca::EigenSystem rand = dfpca::randomized_eig(S, q, L_max, grid, seed);
  const std::vector<double> res_dense = dfpca::eig_residuals(S, dense, grid);
  const std::vector<double> res_rand = dfpca::eig_residuals(S, rand, grid);

  std::ostringstream table;
  table << "component\tlambda_dense\tlambda_randomized\tlambda_gap\tise\t"
           "residual_dense\tresidual_randomized\n";
  const std::size_t L = std::min(dense.eigenvalues.size(), rand.eigenvalues.size());
  for (std::size_t l = 0; l < L; ++l) {
    const double gap = std::abs(dense.eigenvalues[l] - rand.eigenvalues[l]);
    const double ise_lr = dfpca::ise(rand.eigenfunctions[l], dense.eigenfunctions[l], grid);
    table << l + 1 << '\t' << format_g(dense.eigenvalues[l]) << '\t'
          << format_g(rand.eigenvalues[l]) << '\t' << format_g(gap) << '\t' << format_g(ise_lr)
          << '\t' << format_g(res_dense[l]) << '\t' << format_g(res_rand[l]) << '\n';
  }
  if (!args.output.empty()) write_text(args.output, table.str());
  std::cout << table.str();
  std::cout << "sketch size: " << q << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-dimensional functional principal component analysis"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from an INI file");

  std::uint64_t seed = 20260815;
  int threads = 1;
  app.add_option("--seed", seed, "Master seed for every stochastic stage")->capture_default_str();
  app.add_option("--threads", threads, "Worker thread cap")->capture_default_str();

  FitArgs fit_args;
  CLI::App* fit_cmd = app.add_subcommand("fit", "Fit an FPCA model from a data file");
  fit_cmd->fallthrough();
  fit_args.surface.attach(fit_cmd);
  fit_cmd->add_option("--output", fit_args.output, "Model bundle directory")
      ->capture_default_str();
  fit_cmd->add_option("--fve", fit_args.fve, "Fraction-of-variation threshold")
      ->capture_default_str();
  fit_cmd->add_option("--max-components", fit_args.max_components, "Component cap")
      ->capture_default_str();
  fit_cmd->add_option("--eig", fit_args.eig, "Eigensolver: dense or randomized")
      ->capture_default_str();
  fit_cmd->add_option("--sketch", fit_args.sketch, "Randomized sketch columns (0 = default)");
  fit_cmd->add_option("--score", fit_args.score, "Score method: auto, pace, or integration")
      ->capture_default_str();

  PredictArgs predict_args;
  CLI::App* predict_cmd = app.add_subcommand("predict", "Score and reconstruct new samples");
  predict_cmd->fallthrough();
  predict_cmd->add_option("--model", predict_args.model, "Model bundle directory")->required();
  predict_cmd->add_option("--input", predict_args.input, "Long-format query file")->required();
  predict_cmd->add_option("--output", predict_args.output, "Predictions file")
      ->capture_default_str();
  predict_cmd->add_option("--scores-output", predict_args.scores_output,
                          "Optional per-sample score table");
  predict_cmd->add_option("--method", predict_args.method,
                          "Score method: model, pace, or integration")
      ->capture_default_str();

  SimulateArgs sim_args;
  CLI::App* sim_cmd = app.add_subcommand("simulate", "Generate reference datasets with truth");
  sim_cmd->fallthrough();
  sim_cmd->add_option("--model", sim_args.model, "sim1 or sim2")->capture_default_str();
  sim_cmd->add_option("--n", sim_args.n, "Samples per run")->capture_default_str();
  sim_cmd->add_option("--points", sim_args.points, "Observations per curve (sim1)")
      ->capture_default_str();
  sim_cmd->add_option("--grid", sim_args.grid, "Grid cells per axis (0 = model default)");
  sim_cmd->add_option("--runs", sim_args.runs, "Independent replicate runs")
      ->capture_default_str();
  sim_cmd->add_option("--output", sim_args.output, "Output directory")->capture_default_str();

  BandwidthArgs bw_args;
  CLI::App* bw_cmd = app.add_subcommand("bandwidth", "Cross-validated bandwidth search trace");
  bw_cmd->fallthrough();
  bw_args.surface.attach(bw_cmd);
  bw_cmd->add_option("--target", bw_args.target, "mean, covariance, or diag")
      ->capture_default_str();
  bw_cmd->add_option("--trace-output", bw_args.trace_output,
                     "Write the evaluation trace to this file");

  EigDiagArgs eig_args;
  CLI::App* eig_cmd = app.add_subcommand("eig-diag", "Randomized-vs-dense eigensolver diagnostics");
  eig_cmd->fallthrough();
  eig_args.surface.attach(eig_cmd);
  eig_cmd->add_option("--max-components", eig_args.max_components, "Components to compare")
      ->capture_default_str();
  eig_cmd->add_option("--sketch", eig_args.sketch, "Randomized sketch columns (0 = default)");
  eig_cmd->add_option("--output", eig_args.output, "Write the diagnostic table to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(dfpca::ErrorClass::Usage);
  }

  dfpca::set_max_threads(threads);
  try {
    if (*fit_cmd) return run_fit(fit_args, seed, app.config_to_str(true, false));
    if (*predict_cmd) return run_predict(predict_args);
    if (*sim_cmd) return run_simulate(sim_args, seed);
    if (*bw_cmd) return run_bandwidth(bw_args, seed);
    if (*eig_cmd) return run_eig_diag(eig_args, seed);
  } catch (const dfpca::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return static_cast<int>(dfpca::ErrorClass::Numeric);
  }
  return 0;
}
