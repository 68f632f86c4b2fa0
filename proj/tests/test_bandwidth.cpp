#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "dfpca/bandwidth.hpp"
#include "dfpca/dataset.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/rng.hpp"
#include "dfpca/smoother.hpp"

namespace {

using dfpca::Bandwidth;
using dfpca::CvObjective;
using dfpca::CvTarget;
using dfpca::EvaluationGrid;
using dfpca::FunctionalDataset;
using dfpca::Sample;

FunctionalDataset make_noisy_1d(std::size_t n_samples, std::size_t n_obs, double sigma,
                                std::uint64_t seed) {
  FunctionalDataset data;
  data.dim = 1;
  for (std::size_t i = 0; i < n_samples; ++i) {
    auto loc = dfpca::RandomStream::substream(seed, 2 * i);
    auto err = dfpca::RandomStream::substream(seed, 2 * i + 1);
    Sample s;
    s.id = std::to_string(i);
    for (std::size_t j = 0; j < n_obs; ++j) {
      const double t = loc.uniform();
      s.coords.push_back(t);
      s.values.push_back(2.0 + 3.0 * t + sigma * err.normal());
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

double bowl(const Bandwidth& h, double h_star) {
  const double z = std::log(h[0]) - std::log(h_star);
  return z * z;
}

// Deterministic bounded noise keyed on the bandwidth bits and a salt, so the
// perturbed objective is still a fixed function of the bandwidth.
double noise01(double x, std::uint64_t salt) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &x, sizeof(bits));
  dfpca::RandomStream rng(bits ^ salt);
  return 2.0 * rng.uniform() - 1.0;
}

}  // namespace

TEST_CASE("cross-validation score is exact for linear truth and big windows") {
  FunctionalDataset data = make_noisy_1d(5, 10, 0.0, 41);
  EvaluationGrid grid = EvaluationGrid::uniform({0.0}, {1.0}, {21});
  CvObjective obj(data, grid, CvTarget::Mean);
  CHECK(cv_score(Bandwidth{{1.0}}, obj) < 1e-12);
}

TEST_CASE("cross-validation shortcut equals literal leave-one-out refits") {
  EvaluationGrid grid = EvaluationGrid::uniform({0.0}, {1.0}, {21});

  SECTION("mean and squared-value targets") {
    FunctionalDataset data = make_noisy_1d(5, 10, 0.3, 42);
    for (const bool squares : {false, true}) {
      CvObjective obj(data, grid, squares ? CvTarget::DiagPlusNoise : CvTarget::Mean);
      const Bandwidth h{{0.35}};
      const double shortcut = cv_score(h, obj);

      double brute = 0.0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < data.samples.size(); ++i) {
        const Sample& s = data.samples[i];
        for (std::size_t j = 0; j < s.n_obs(); ++j) {
          dfpca::PointFitOptions opt;
          opt.fixed_ridge = 0.0;
          opt.squares = squares;
          opt.exclude_sample = static_cast<long>(i);
          opt.exclude_j = static_cast<long>(j);
          const auto fit = dfpca::fit_mean_point(data, s.coord(j, 1), h, opt);
          REQUIRE(fit.status != dfpca::FitStatus::Empty);
          const double y = squares ? s.values[j] * s.values[j] : s.values[j];
          brute += (y - fit.value) * (y - fit.value);
          ++count;
        }
      }
      brute /= static_cast<double>(count);
      CHECK(shortcut == Catch::Approx(brute).epsilon(1e-10));
    }
  }

  SECTION("covariance target over ordered raw-product pairs") {
    FunctionalDataset data = make_noisy_1d(4, 5, 0.3, 43);
    CvObjective obj(data, grid, CvTarget::Covariance);
    REQUIRE(obj.n_units() == 4 * 5 * 4);
    const Bandwidth h{{0.4}};
    const double shortcut = cv_score(h, obj);

    double brute = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      const Sample& s = data.samples[i];
      for (std::size_t j = 0; j < s.n_obs(); ++j)
        for (std::size_t l = 0; l < s.n_obs(); ++l) {
          if (l == j) continue;
          dfpca::PointFitOptions opt;
          opt.fixed_ridge = 0.0;
          opt.exclude_sample = static_cast<long>(i);
          opt.exclude_j = static_cast<long>(j);
          opt.exclude_l = static_cast<long>(l);
          const auto fit =
              dfpca::fit_pair_point(data, s.coord(j, 1), s.coord(l, 1), h, opt);
          REQUIRE(fit.status != dfpca::FitStatus::Empty);
          const double y = s.values[j] * s.values[l];
          brute += (y - fit.value) * (y - fit.value);
          ++count;
        }
    }
    brute /= static_cast<double>(count);
    CHECK(shortcut == Catch::Approx(brute).epsilon(1e-10));
  }
}

TEST_CASE("tiny bandwidths score worse than sensible ones on noisy data") {
  FunctionalDataset data = make_noisy_1d(20, 10, 0.5, 44);
  EvaluationGrid grid = EvaluationGrid::uniform({0.0}, {1.0}, {21});
  CvObjective obj(data, grid, CvTarget::Mean);
  const double tiny = cv_score(Bandwidth{{0.02}}, obj);
  const double sane = cv_score(Bandwidth{{0.3}}, obj);
  CHECK(tiny > sane);
  // Unsmoothed residuals against a neighbor carry roughly twice the noise.
  CHECK(tiny > 0.25);
}

TEST_CASE("isolated observations make the objective fail loudly") {
  FunctionalDataset data;
  data.dim = 1;
  Sample s;
  s.coords = {0.1, 0.9};
  s.values = {1.0, 2.0};
  data.samples.push_back(s);
  EvaluationGrid grid = EvaluationGrid::uniform({0.0}, {1.0}, {11});
  CvObjective obj(data, grid, CvTarget::Mean);
  CHECK_THROWS_MATCHES(cv_score(Bandwidth{{0.05}}, obj), dfpca::Error,
                       Catch::Matchers::Predicate<dfpca::Error>([](const dfpca::Error& e) {
                         return e.name() == "BandwidthTooSmall" &&
                                e.error_class() == dfpca::ErrorClass::Numeric;
                       }));
}

TEST_CASE("the unit cap is a seeded deterministic subsample") {
  FunctionalDataset data = make_noisy_1d(30, 20, 0.3, 45);
  EvaluationGrid grid = EvaluationGrid::uniform({0.0}, {1.0}, {21});
  dfpca::CvOptions options;
  options.max_units = 100;
  options.seed = 7;
  CvObjective a(data, grid, CvTarget::Mean, options);
  CvObjective b(data, grid, CvTarget::Mean, options);
  REQUIRE(a.n_units() == 100);
  const Bandwidth h{{0.25}};
  REQUIRE(cv_score(h, a) == cv_score(h, b));
}

TEST_CASE("rule-of-thumb bandwidth targets thirty observations per window") {
  const auto with_n = [](std::size_t n_obs_total) {
    FunctionalDataset data;
    data.dim = 1;
    Sample s;
    for (std::size_t j = 0; j < n_obs_total; ++j) {
      s.coords.push_back(static_cast<double>(j));
      s.values.push_back(0.0);
    }
    data.samples.push_back(s);
    return data;
  };
  CHECK(dfpca::rule_of_thumb_bandwidth(with_n(30), {10.0}).h[0] == Catch::Approx(10.0));
  CHECK(dfpca::rule_of_thumb_bandwidth(with_n(240), {10.0}).h[0] == Catch::Approx(1.25));
  CHECK(dfpca::rule_of_thumb_bandwidth(with_n(15), {10.0}).h[0] == Catch::Approx(10.0));

  FunctionalDataset cube;
  cube.dim = 3;
  Sample s;
  for (std::size_t j = 0; j < 810; ++j) {
    s.coords.insert(s.coords.end(), {0.0, 0.0, 0.0});
    s.values.push_back(0.0);
  }
  cube.samples.push_back(s);
  const auto h = dfpca::rule_of_thumb_bandwidth(cube, {1.0, 2.0, 4.0});
  CHECK(h.h[0] == Catch::Approx(1.0 / 3.0));
  CHECK(h.h[1] == Catch::Approx(2.0 / 3.0));
  CHECK(h.h[2] == Catch::Approx(4.0 / 3.0));
}

TEST_CASE("trust-region optimizer solves a noiseless quadratic bowl") {
  dfpca::OptimizeOptions opts;
  opts.budget = 30;
  opts.seed = 11;
  const auto res = dfpca::optimize_bandwidth(
      [](const Bandwidth& h) { return bowl(h, 0.3); }, Bandwidth{{0.05}}, {10.0}, opts);
  CHECK(res.trace.size() <= 30);
  CHECK(std::abs(res.best.h[0] - 0.3) < 1e-3);

  SECTION("best-so-far objective record is nonincreasing") {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& row : res.trace) {
      const double so_far = std::min(best, row.objective);
      CHECK(so_far <= best);
      best = so_far;
    }
    CHECK(best == res.objective);
  }
}

TEST_CASE("trust-region optimizer tolerates bounded objective noise") {
  // Noise amplitude is 1% of the objective variation across the initial
  // region (radius 0.5 in log units -> variation 0.25), i.e. 0.0025.
  std::size_t within = 0;
  for (std::uint64_t rep = 0; rep < 20; ++rep) {
    dfpca::OptimizeOptions opts;
    opts.budget = 60;
    opts.seed = rep;
    const auto res = dfpca::optimize_bandwidth(
        [rep](const Bandwidth& h) {
          return bowl(h, 0.3) + 0.0025 * noise01(h[0], 0x9e3779b97f4a7c15ULL * (rep + 1));
        },
        Bandwidth{{0.1}}, {10.0}, opts);
    if (std::abs(res.best.h[0] - 0.3) / 0.3 <= 0.05) ++within;
  }
  CHECK(within >= 18);
}

TEST_CASE("optimizer preconditions and invariants") {
  SECTION("budget below the quadratic-fit minimum is rejected") {
    dfpca::OptimizeOptions opts;
    opts.budget = 3;
    CHECK_THROWS_MATCHES(
        dfpca::optimize_bandwidth([](const Bandwidth& h) { return bowl(h, 0.3); },
                                  Bandwidth{{0.1}}, {10.0}, opts),
        dfpca::Error, Catch::Matchers::Predicate<dfpca::Error>([](const dfpca::Error& e) {
          return e.name() == "InvalidArgument";
        }));
  }

  SECTION("fixed seeds reproduce the evaluation sequence bit for bit") {
    dfpca::OptimizeOptions opts;
    opts.budget = 40;
    opts.seed = 5;
    const auto run = [&] {
      return dfpca::optimize_bandwidth(
          [](const Bandwidth& h) { return bowl(h, 0.23) + 0.001 * noise01(h[0], 77); },
          Bandwidth{{0.08}}, {10.0}, opts);
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
      REQUIRE(a.trace[i].h[0] == b.trace[i].h[0]);
      REQUIRE(a.trace[i].objective == b.trace[i].objective);
    }
    REQUIRE(a.best.h[0] == b.best.h[0]);
  }

  SECTION("log-space search is covariant under unit rescaling") {
    dfpca::OptimizeOptions opts;
    opts.budget = 40;
    opts.seed = 9;
    const double c = 37.0;
    const auto base = dfpca::optimize_bandwidth(
        [](const Bandwidth& h) { return bowl(h, 0.3); }, Bandwidth{{0.05}}, {10.0}, opts);
    const auto scaled = dfpca::optimize_bandwidth(
        [c](const Bandwidth& h) { return bowl(h, 0.3 * c); }, Bandwidth{{0.05 * c}},
        {10.0 * c}, opts);
    CHECK(scaled.best.h[0] == Catch::Approx(base.best.h[0] * c).epsilon(0.01));
  }

  SECTION("returned bandwidth never exceeds the axis extent") {
    dfpca::OptimizeOptions opts;
    opts.budget = 40;
    opts.seed = 3;
    const auto res = dfpca::optimize_bandwidth(
        [](const Bandwidth& h) { return bowl(h, 5.0); }, Bandwidth{{0.5}}, {1.0}, opts);
    CHECK(res.best.h[0] <= 1.0 + 1e-12);
    CHECK(res.best.h[0] == Catch::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("optimizing a real cross-validation objective lands in a sane range") {
  FunctionalDataset data = make_noisy_1d(15, 15, 0.4, 46);
  EvaluationGrid grid = EvaluationGrid::uniform({0.0}, {1.0}, {21});
  CvObjective obj(data, grid, CvTarget::Mean);
  dfpca::OptimizeOptions opts;
  opts.budget = 25;
  opts.seed = 13;
  const auto h0 = dfpca::rule_of_thumb_bandwidth(data, {1.0});
  const auto res = dfpca::optimize_bandwidth(obj, h0, opts);
  CHECK(std::isfinite(res.objective));
  CHECK(res.best.h[0] > 0.02);
  CHECK(res.best.h[0] <= 1.0);
  // Best-evaluated can never be worse than the starting point.
  CHECK(res.objective <= cv_score(h0, obj) + 1e-12);
}
