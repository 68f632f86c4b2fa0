#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "dfpca/dataset.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/rng.hpp"
#include "dfpca/scores.hpp"
#include "dfpca/surface.hpp"

namespace {

using dfpca::EvaluationGrid;
using dfpca::FpcaModel;
using dfpca::FunctionalDataset;
using dfpca::Index;
using dfpca::Sample;
using dfpca::SurfaceEstimate;
using dfpca::SurfaceKind;

double riemann_dot(const EvaluationGrid& grid, const std::vector<double>& a,
                   const std::vector<double>& b) {
  double s = 0.0;
  for (Index f = 0; f < grid.size(); ++f) {
    if (!grid.in_mask(f)) continue;
    s += a[static_cast<std::size_t>(f)] * b[static_cast<std::size_t>(f)];
  }
  return s * grid.cell_volume();
}

std::vector<double> eval_on_grid(const EvaluationGrid& grid,
                                 const std::function<double(const double*)>& f) {
  std::vector<double> out(static_cast<std::size_t>(grid.size()), 0.0);
  std::vector<double> coord;
  for (Index i = 0; i < grid.size(); ++i) {
    grid.node_coords(i, coord);
    out[static_cast<std::size_t>(i)] = f(coord.data());
  }
  return out;
}

// Model with a hand-built eigen system: the seed surfaces are orthonormalized
// discretely so integration scores act as exact projections on the grid.
FpcaModel make_model(const EvaluationGrid& grid,
                     const std::function<double(const double*)>& mean_fn,
                     std::vector<std::vector<double>> seeds, std::vector<double> lambda,
                     double sigma2) {
  for (std::size_t l = 0; l < seeds.size(); ++l) {
    for (std::size_t p = 0; p < l; ++p) {
      const double c = riemann_dot(grid, seeds[p], seeds[l]);
      for (std::size_t i = 0; i < seeds[l].size(); ++i) seeds[l][i] -= c * seeds[p][i];
    }
    const double norm = std::sqrt(riemann_dot(grid, seeds[l], seeds[l]));
    for (double& v : seeds[l]) v /= norm;
  }
  FpcaModel model;
  model.mean.grid = grid;
  model.mean.kind = SurfaceKind::Mean;
  model.mean.values = eval_on_grid(grid, mean_fn);
  model.eig.eigenvalues = lambda;
  model.eig.eigenfunctions = std::move(seeds);
  double total = 0.0;
  for (double l : lambda) total += l;
  model.eig.total_variance = total;
  double cum = 0.0;
  for (double l : lambda) {
    cum += l;
    model.eig.fve.push_back(cum / total);
  }
  model.sigma2 = sigma2;
  return model;
}

Sample dense_on_node_sample(const EvaluationGrid& grid, const std::vector<double>& values) {
  Sample s;
  s.id = "dense";
  std::vector<double> coord;
  for (Index f = 0; f < grid.size(); ++f) {
    grid.node_coords(f, coord);
    s.coords.insert(s.coords.end(), coord.begin(), coord.end());
    s.values.push_back(values[static_cast<std::size_t>(f)]);
  }
  return s;
}

}  // namespace

TEST_CASE("noise variance pooling subtracts curve variance and squared mean") {
  EvaluationGrid grid = EvaluationGrid::midpoint({0.0}, {1.0}, {50});
  const auto g = static_cast<std::size_t>(grid.size());
  const double pi = std::acos(-1.0);

  const auto mu = eval_on_grid(grid, [](const double* t) { return 1.0 + t[0]; });
  const auto q = eval_on_grid(grid, [&](const double* t) {
    return std::sqrt(0.5 + 0.1 * std::sin(2.0 * pi * t[0]));
  });

  SurfaceEstimate mean{grid, mu, SurfaceKind::Mean};
  SurfaceEstimate cov;
  cov.grid = grid;
  cov.kind = SurfaceKind::Covariance;
  cov.values.resize(g * g);
  for (std::size_t s = 0; s < g; ++s)
    for (std::size_t t = 0; t < g; ++t) cov.values[s * g + t] = q[s] * q[t];

  SurfaceEstimate diag;
  diag.grid = grid;
  diag.kind = SurfaceKind::DiagPlusNoise;
  diag.values.resize(g);

  SECTION("recovers an additive noise variance exactly") {
    for (std::size_t f = 0; f < g; ++f) diag.values[f] = q[f] * q[f] + mu[f] * mu[f] + 0.25;
    CHECK(dfpca::estimate_sigma2(diag, cov, mean) == Catch::Approx(0.25).margin(1e-12));
  }

  SECTION("noise-free surfaces give zero") {
    for (std::size_t f = 0; f < g; ++f) diag.values[f] = q[f] * q[f] + mu[f] * mu[f];
    CHECK(dfpca::estimate_sigma2(diag, cov, mean) <= 1e-12);
  }

  SECTION("negative pointwise values are clamped at zero") {
    for (std::size_t f = 0; f < g; ++f) diag.values[f] = q[f] * q[f] + mu[f] * mu[f] - 0.5;
    CHECK(dfpca::estimate_sigma2(diag, cov, mean) == 0.0);
  }

  SECTION("masked nodes are excluded from the average") {
    std::vector<std::uint8_t> mask(g, 1);
    for (std::size_t f = g / 2; f < g; ++f) mask[f] = 0;
    EvaluationGrid masked(std::vector<std::vector<double>>{grid.axis(0)}, mask);
    SurfaceEstimate mean2{masked, mu, SurfaceKind::Mean};
    SurfaceEstimate cov2 = cov;
    cov2.grid = masked;
    SurfaceEstimate diag2;
    diag2.grid = masked;
    diag2.kind = SurfaceKind::DiagPlusNoise;
    diag2.values.resize(g);
    for (std::size_t f = 0; f < g; ++f)
      diag2.values[f] = f < g / 2 ? q[f] * q[f] + mu[f] * mu[f] + 0.25 : 1e9;
    CHECK(dfpca::estimate_sigma2(diag2, cov2, mean2) == Catch::Approx(0.25).margin(1e-12));
  }

  SECTION("surface kinds are checked") {
    CHECK_THROWS_MATCHES(dfpca::estimate_sigma2(mean, cov, mean), dfpca::Error,
                         Catch::Matchers::Predicate<dfpca::Error>(
                             [](const dfpca::Error& e) { return e.name() == "InvalidArgument"; }));
  }
}

TEST_CASE("conditional-expectation scores follow the closed form") {
  EvaluationGrid grid = EvaluationGrid::uniform({0.0}, {1.0}, {11});
  auto model = make_model(
      grid, [](const double* t) { return t[0]; },
      {eval_on_grid(grid, [](const double*) { return 1.0; })}, {2.0}, 0.5);

  SECTION("single observation, single component") {
    Sample s;
    s.coords = {0.37};
    s.values = {1.9};
    const double mu_hat = dfpca::interp_multilinear(grid, model.mean.values, s.coords.data());
    const double phi_hat =
        dfpca::interp_multilinear(grid, model.eig.eigenfunctions[0], s.coords.data());
    const double expected = 2.0 * phi_hat * (1.9 - mu_hat) / (2.0 * phi_hat * phi_hat + 0.5);
    const auto a = dfpca::pace_scores(s, model);
    REQUIRE(a.size() == 1);
    CHECK(a[0] == Catch::Approx(expected).margin(1e-12));

    SECTION("shrinkage keeps the score below the projection limit") {
      CHECK(std::abs(a[0]) < std::abs((1.9 - mu_hat) / phi_hat));
    }
  }

  SECTION("observations exactly on the mean give zero scores") {
    Sample s;
    for (double t : {0.05, 0.33, 0.61, 0.98}) {
      s.coords.push_back(t);
      s.values.push_back(dfpca::interp_multilinear(grid, model.mean.values, &t));
    }
    for (double a : dfpca::pace_scores(s, model)) CHECK(std::abs(a) < 1e-12);
  }

  SECTION("scores are linear in the centered values") {
    Sample s, s2;
    for (double t : {0.1, 0.4, 0.75}) {
      const double mu_hat = dfpca::interp_multilinear(grid, model.mean.values, &t);
      s.coords.push_back(t);
      s.values.push_back(mu_hat + (t - 0.3));
      s2.coords.push_back(t);
      s2.values.push_back(mu_hat + 2.5 * (t - 0.3));
    }
    const auto a = dfpca::pace_scores(s, model);
    const auto a2 = dfpca::pace_scores(s2, model);
    CHECK(a2[0] == Catch::Approx(2.5 * a[0]).margin(1e-12));
  }

  SECTION("coordinates outside the hull are rejected") {
    Sample s;
    s.coords = {1.5};
    s.values = {0.0};
    CHECK_THROWS_MATCHES(dfpca::pace_scores(s, model), dfpca::Error,
                         Catch::Matchers::Predicate<dfpca::Error>(
                             [](const dfpca::Error& e) { return e.name() == "OutOfDomain"; }));
  }
}

TEST_CASE("conditional-expectation scores approach integration scores on dense data") {
  const double pi = std::acos(-1.0);
  EvaluationGrid grid = EvaluationGrid::midpoint({0.0}, {1.0}, {101});
  auto model = make_model(
      grid, [&](const double* t) { return t[0] + std::sin(pi * t[0]); },
      {eval_on_grid(grid, [&](const double* t) { return std::cos(pi * t[0]); }),
       eval_on_grid(grid, [&](const double* t) { return std::sin(2.0 * pi * t[0]); })},
      {4.0, 1.0}, 1e-4);

  dfpca::RandomStream rng(2718);
  Sample s;
  for (int j = 0; j < 1000; ++j) {
    const double t = grid.hull_lo(0) + (grid.hull_hi(0) - grid.hull_lo(0)) * rng.uniform();
    const double x = dfpca::interp_multilinear(grid, model.mean.values, &t) +
                     2.0 * dfpca::interp_multilinear(grid, model.eig.eigenfunctions[0], &t) -
                     1.3 * dfpca::interp_multilinear(grid, model.eig.eigenfunctions[1], &t);
    s.coords.push_back(t);
    s.values.push_back(x);
  }

  const auto pace = dfpca::pace_scores(s, model);
  const auto integ = dfpca::integration_scores(s, model);
  REQUIRE(pace.size() == 2);
  double rms = 0.0;
  for (std::size_t l = 0; l < 2; ++l) rms += (pace[l] - integ[l]) * (pace[l] - integ[l]);
  rms = std::sqrt(rms / 2.0);
  CHECK(rms < 1e-2);
  CHECK(pace[0] == Catch::Approx(2.0).margin(0.05));
  CHECK(pace[1] == Catch::Approx(-1.3).margin(0.05));
}

TEST_CASE("integration scores project the gridded centered curve") {
  const double pi = std::acos(-1.0);
  EvaluationGrid grid = EvaluationGrid::midpoint({0.0}, {1.0}, {101});
  auto model = make_model(
      grid, [](const double* t) { return 1.0 + 0.5 * t[0]; },
      {eval_on_grid(grid, [&](const double*) { return 1.0; }),
       eval_on_grid(grid, [&](const double* t) { return std::sin(2.0 * pi * t[0]); }),
       eval_on_grid(grid, [&](const double* t) { return std::cos(2.0 * pi * t[0]); })},
      {9.0, 4.0, 1.0}, 0.0);

  SECTION("a sample equal to the mean scores zero") {
    const auto s = dense_on_node_sample(grid, model.mean.values);
    for (double a : dfpca::integration_scores(s, model)) CHECK(std::abs(a) < 1e-12);
  }

  SECTION("a sample offset by one eigenfunction scores on that component only") {
    std::vector<double> values(model.mean.values);
    for (std::size_t f = 0; f < values.size(); ++f)
      values[f] += 3.0 * model.eig.eigenfunctions[1][f];
    const auto s = dense_on_node_sample(grid, values);
    const auto a = dfpca::integration_scores(s, model);
    REQUIRE(a.size() == 3);
    CHECK(a[0] == Catch::Approx(0.0).margin(1e-6));
    CHECK(a[1] == Catch::Approx(3.0).margin(1e-6));
    CHECK(a[2] == Catch::Approx(0.0).margin(1e-6));
  }

  SECTION("the sparse-sample warning trips below a quarter of the nodes") {
    Sample tiny;
    for (int j = 0; j < 10; ++j) {
      tiny.coords.push_back(0.05 + 0.09 * j);
      tiny.values.push_back(1.0);
    }
    bool warned = false;
    dfpca::integration_scores(tiny, model, &warned);
    CHECK(warned);

    Sample ok;
    for (int j = 0; j < 30; ++j) {
      ok.coords.push_back(0.01 + 0.03 * j);
      ok.values.push_back(1.0);
    }
    warned = true;
    dfpca::integration_scores(ok, model, &warned);
    CHECK_FALSE(warned);
  }
}

TEST_CASE("integration scores recover generator scores from dense samples") {
  const double pi = std::acos(-1.0);
  EvaluationGrid grid = EvaluationGrid::midpoint({0.0}, {10.0}, {100});
  auto model = make_model(
      grid, [](const double* t) { return t[0] + std::sin(t[0]); },
      {eval_on_grid(grid, [&](const double* t) { return -std::cos(pi * t[0] / 10.0) / std::sqrt(5.0); }),
       eval_on_grid(grid, [&](const double* t) { return std::sin(pi * t[0] / 10.0) / std::sqrt(5.0); })},
      {4.0, 1.0}, 0.0);

  dfpca::RandomStream rng(99);
  double se = 0.0;
  const int n = 20;
  for (int i = 0; i < n; ++i) {
    const double a1 = 2.0 * rng.normal();
    const double a2 = 1.0 * rng.normal();
    Sample s;
    for (int j = 0; j < 400; ++j) {
      const double t = grid.hull_lo(0) + (grid.hull_hi(0) - grid.hull_lo(0)) * rng.uniform();
      s.coords.push_back(t);
      s.values.push_back(dfpca::interp_multilinear(grid, model.mean.values, &t) +
                         a1 * dfpca::interp_multilinear(grid, model.eig.eigenfunctions[0], &t) +
                         a2 * dfpca::interp_multilinear(grid, model.eig.eigenfunctions[1], &t));
    }
    const auto a = dfpca::integration_scores(s, model);
    se += (a[0] - a1) * (a[0] - a1) + (a[1] - a2) * (a[1] - a2);
  }
  CHECK(std::sqrt(se / (2.0 * n)) < 0.05);
}

TEST_CASE("score method selection follows median sample density") {
  EvaluationGrid grid = EvaluationGrid::midpoint({0.0}, {1.0}, {100});
  const auto with_median = [](std::size_t n_obs) {
    FunctionalDataset data;
    data.dim = 1;
    for (int i = 0; i < 5; ++i) {
      Sample s;
      for (std::size_t j = 0; j < n_obs; ++j) {
        s.coords.push_back(static_cast<double>(j) / static_cast<double>(n_obs));
        s.values.push_back(0.0);
      }
      data.samples.push_back(s);
    }
    return data;
  };
  CHECK(dfpca::choose_score_method(with_median(25), grid) == dfpca::ScoreMethod::Integration);
  CHECK(dfpca::choose_score_method(with_median(24), grid) == dfpca::ScoreMethod::Pace);
}

TEST_CASE("reconstruction combines mean and score-weighted eigenfunctions") {
  const double pi = std::acos(-1.0);
  EvaluationGrid grid = EvaluationGrid::midpoint({0.0}, {1.0}, {201});
  auto model = make_model(
      grid, [&](const double* t) { return 1.0 + t[0] * t[0]; },
      {eval_on_grid(grid, [&](const double* t) { return std::cos(pi * t[0]); }),
       eval_on_grid(grid, [&](const double* t) { return std::cos(2.0 * pi * t[0]); })},
      {4.0, 1.0}, 0.1);
  model.scores = {{0.0, 0.0}, {1.5, -0.7}};
  model.sample_ids = {"a", "b"};

  SECTION("zero scores reproduce the mean") {
    const auto x = dfpca::reconstruct_on_grid(model, 0);
    for (std::size_t f = 0; f < x.size(); ++f)
      CHECK(x[f] == Catch::Approx(model.mean.values[f]).margin(1e-14));
  }

  SECTION("nonzero scores add the expansion exactly on the grid") {
    const auto x = dfpca::reconstruct_on_grid(model, 1);
    for (std::size_t f = 0; f < x.size(); ++f) {
      const double want = model.mean.values[f] + 1.5 * model.eig.eigenfunctions[0][f] -
                          0.7 * model.eig.eigenfunctions[1][f];
      CHECK(x[f] == Catch::Approx(want).margin(1e-14));
    }
  }

  SECTION("off-grid evaluation matches the analytic curve to interpolation accuracy") {
    const double t = 0.3777;
    const double got = dfpca::reconstruct_at(model, 1, &t);
    const double phi_norm1 = std::sqrt(riemann_dot(grid, model.eig.eigenfunctions[0],
                                                   model.eig.eigenfunctions[0]));
    REQUIRE(phi_norm1 == Catch::Approx(1.0).margin(1e-12));
    const double want = (1.0 + t * t) + 1.5 * std::cos(pi * t) / std::sqrt(0.5) -
                        0.7 * std::cos(2.0 * pi * t) / std::sqrt(0.5);
    CHECK(got == Catch::Approx(want).margin(1e-3));
  }

  SECTION("coordinates outside the hull are rejected") {
    const double t = 1.25;
    CHECK_THROWS_MATCHES(dfpca::reconstruct_at(model, 1, &t), dfpca::Error,
                         Catch::Matchers::Predicate<dfpca::Error>(
                             [](const dfpca::Error& e) { return e.name() == "OutOfDomain"; }));
  }

  SECTION("score bookkeeping is validated") {
    CHECK_THROWS_AS(dfpca::reconstruct_on_grid(model, 7), dfpca::Error);
    CHECK_THROWS_AS(dfpca::reconstruct_on_grid(model, std::vector<double>{1.0}), dfpca::Error);
    model.validate();
    model.sigma2 = -1.0;
    CHECK_THROWS_AS(model.validate(), dfpca::Error);
  }
}

TEST_CASE("score sample variance tracks the eigenvalues") {
  const double pi = std::acos(-1.0);
  EvaluationGrid grid = EvaluationGrid::midpoint({0.0}, {1.0}, {80});
  auto model = make_model(
      grid, [](const double*) { return 0.0; },
      {eval_on_grid(grid, [&](const double* t) { return std::cos(pi * t[0]); }),
       eval_on_grid(grid, [&](const double* t) { return std::sin(2.0 * pi * t[0]); })},
      {4.0, 1.0}, 0.0);

  dfpca::RandomStream rng(512);
  const int n = 500;
  std::vector<double> a1s, a2s;
  for (int i = 0; i < n; ++i) {
    const double a1 = 2.0 * rng.normal();
    const double a2 = rng.normal();
    std::vector<double> values(static_cast<std::size_t>(grid.size()));
    for (std::size_t f = 0; f < values.size(); ++f)
      values[f] = a1 * model.eig.eigenfunctions[0][f] + a2 * model.eig.eigenfunctions[1][f];
    const auto a = dfpca::integration_scores(dense_on_node_sample(grid, values), model);
    a1s.push_back(a[0]);
    a2s.push_back(a[1]);
  }
  const auto variance = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
  };
  CHECK(variance(a1s) == Catch::Approx(4.0).epsilon(0.2));
  CHECK(variance(a2s) == Catch::Approx(1.0).epsilon(0.2));
}

TEST_CASE("leave-one-location-out prediction error") {
  const double pi = std::acos(-1.0);
  EvaluationGrid grid = EvaluationGrid::midpoint({0.0}, {1.0}, {21});

  SECTION("pure noise yields the analytic expected error") {
    auto model = make_model(grid, [](const double*) { return 0.0; },
                            {eval_on_grid(grid, [&](const double*) { return 1.0; })}, {0.01}, 0.25);
    const std::vector<std::vector<double>> stations = {{0.1}, {0.25}, {0.45}, {0.6}, {0.8}, {0.95}};
    FunctionalDataset data;
    data.dim = 1;
    dfpca::RandomStream rng(31415);
    const int n = 150;
    for (int i = 0; i < n; ++i) {
      Sample s;
      s.id = std::to_string(i);
      for (const auto& st : stations) {
        s.coords.push_back(st[0]);
        s.values.push_back(0.5 * rng.normal());
      }
      data.samples.push_back(s);
    }
    const auto res = dfpca::holdout_prediction_error(data, stations, model, dfpca::ScoreMethod::Pace);
    REQUIRE(res.per_location.size() == stations.size());
    const double want = n * 0.25;  // each held-out squared error has mean sigma^2
    for (double e : res.per_location) CHECK(e == Catch::Approx(want).epsilon(0.25));
    CHECK(res.mean == Catch::Approx(want).epsilon(0.15));
    CHECK(res.standard_error > 0.0);
  }

  SECTION("a near-duplicate station keeps its twin's error at the noise level") {
    auto model = make_model(grid, [](const double*) { return 0.0; },
                            {eval_on_grid(grid, [&](const double* t) {
                              return std::sqrt(2.0) * std::sin(pi * t[0]);
                            })},
                            {4.0}, 0.01);
    std::vector<std::vector<double>> stations = {{0.3}, {0.5}, {0.7}, {0.9}};
    FunctionalDataset data;
    data.dim = 1;
    dfpca::RandomStream rng(7);
    const int n = 100;
    for (int i = 0; i < n; ++i) {
      const double a = 2.0 * rng.normal();
      Sample s;
      for (const auto& st : stations) {
        s.coords.push_back(st[0]);
        s.values.push_back(a * dfpca::interp_multilinear(grid, model.eig.eigenfunctions[0],
                                                         st.data()) +
                           0.1 * rng.normal());
      }
      // The twin observation sits right next to the first station.
      const double twin = 0.3 + 1e-3;
      s.coords.push_back(twin);
      s.values.push_back(a * dfpca::interp_multilinear(grid, model.eig.eigenfunctions[0], &twin) +
                         0.1 * rng.normal());
      data.samples.push_back(s);
    }
    const auto res = dfpca::holdout_prediction_error(data, stations, model, dfpca::ScoreMethod::Pace);
    // Information leaks through the twin: the error stays near n * sigma^2-level
    // rather than blowing up to the signal scale.
    CHECK(res.per_location[0] < 5.0 * n * 2.0 * 0.01);
  }

  SECTION("fewer than two locations is rejected") {
    auto model = make_model(grid, [](const double*) { return 0.0; },
                            {eval_on_grid(grid, [&](const double*) { return 1.0; })}, {1.0}, 0.1);
    FunctionalDataset data;
    data.dim = 1;
    CHECK_THROWS_MATCHES(
        dfpca::holdout_prediction_error(data, {{0.5}}, model, dfpca::ScoreMethod::Pace),
        dfpca::Error, Catch::Matchers::Predicate<dfpca::Error>([](const dfpca::Error& e) {
          return e.name() == "InvalidArgument";
        }));
  }
}
