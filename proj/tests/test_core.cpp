#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "dfpca/binning.hpp"
#include "dfpca/dataset.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/kernel.hpp"
#include "dfpca/rng.hpp"
#include "dfpca/surface.hpp"

using namespace dfpca;

namespace {

// Independent oracle for linear binning: the multilinear mass an observation
// sends to a node equals the product of per-axis tent functions of width one
// cell. Implemented without reference to the binning code path.
double tent_mass(const EvaluationGrid& grid, const double* x, const std::vector<Index>& node) {
  double m = 1.0;
  for (std::size_t k = 0; k < grid.dim(); ++k) {
    const auto& ax = grid.axis(k);
    const auto i = static_cast<std::size_t>(node[k]);
    const double c = ax[i];
    double t = 0.0;
    if (x[k] >= c && i + 1 < ax.size())
      t = 1.0 - (x[k] - c) / (ax[i + 1] - c);
    else if (x[k] <= c && i > 0)
      t = 1.0 - (c - x[k]) / (c - ax[i - 1]);
    if (x[k] == c) t = 1.0;
    m *= std::max(0.0, t);
  }
  return m;
}

FunctionalDataset random_dataset_2d(std::size_t n_samples, std::size_t n_obs, std::uint64_t seed) {
  RandomStream rng(seed);
  FunctionalDataset data;
  data.dim = 2;
  for (std::size_t i = 0; i < n_samples; ++i) {
    Sample s;
    s.id = "s" + std::to_string(i);
    for (std::size_t j = 0; j < n_obs; ++j) {
      s.coords.push_back(rng.uniform());
      s.coords.push_back(2.0 * rng.uniform() - 1.0);
      s.values.push_back(rng.normal());
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace

TEST_CASE("product Epanechnikov kernel point values") {
  const double h1[] = {1.0};
  const double z[] = {0.0};
  CHECK(kernel_eval(z, h1, 1) == Catch::Approx(0.75).epsilon(1e-15));

  const double h2[] = {1.0, 1.0};
  const double z2[] = {0.0, 0.0};
  CHECK(kernel_eval(z2, h2, 2) == Catch::Approx(0.5625).epsilon(1e-15));

  const double edge[] = {1.0, 0.0};
  CHECK(kernel_eval(edge, h2, 2) == 0.0);
  const double outside[] = {1.5};
  CHECK(kernel_eval(outside, h1, 1) == 0.0);
}

TEST_CASE("kernel integrates to one for any bandwidth") {
  // Midpoint quadrature; the kernel scaling 1/h per axis must normalize it.
  auto integral_1d = [](double h) {
    const int n = 200000;
    const double a = -h, width = 2.0 * h;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const double u = a + width * (i + 0.5) / n;
      acc += kernel_eval(&u, &h, 1);
    }
    return acc * width / n;
  };
  CHECK(integral_1d(1.0) == Catch::Approx(1.0).margin(1e-6));
  CHECK(integral_1d(0.37) == Catch::Approx(1.0).margin(1e-6));

  const double h2[] = {0.5, 2.0};
  const int n = 600;
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double u[2] = {-0.5 + 1.0 * (i + 0.5) / n, -2.0 + 4.0 * (j + 0.5) / n};
      acc += kernel_eval(u, h2, 2);
    }
  acc *= (1.0 / n) * (4.0 / n);
  CHECK(acc == Catch::Approx(1.0).margin(1e-5));
}

TEST_CASE("flattening is row-major with the last axis fastest") {
  EvaluationGrid grid({{0.0, 1.0}, {0.0, 0.5, 1.0}});
  REQUIRE(grid.shape() == std::vector<Index>{2, 3});
  CHECK(grid.flat_index({1, 2}) == 5);
  CHECK(grid.flat_index({0, 2}) == 2);
  CHECK(grid.flat_index({1, 0}) == 3);
  std::vector<Index> idx;
  grid.multi_index(4, idx);
  CHECK(idx == std::vector<Index>{1, 1});
}

TEST_CASE("grid constructors and invariants") {
  auto g = EvaluationGrid::uniform({0.0}, {10.0}, {11});
  CHECK(g.spacing(0) == Catch::Approx(1.0));
  CHECK(g.equispaced());
  CHECK(g.cell_volume() == Catch::Approx(1.0));

  auto m = EvaluationGrid::midpoint({0.0, 0.0}, {1.0, 2.0}, {4, 8});
  CHECK(m.node(0, 0) == Catch::Approx(0.125));
  CHECK(m.spacing(1) == Catch::Approx(0.25));
  CHECK(m.cell_volume() == Catch::Approx(0.0625));

  EvaluationGrid uneven({{0.0, 0.1, 1.0}});
  CHECK_FALSE(uneven.equispaced());
  CHECK_THROWS_AS(uneven.require_equispaced("x"), Error);

  CHECK_THROWS_AS(EvaluationGrid({{1.0, 1.0}}), Error);
  CHECK_THROWS_AS(EvaluationGrid::uniform({0.0}, {0.0}, {4}), Error);
}

TEST_CASE("bandwidth validation") {
  auto g = EvaluationGrid::uniform({0.0}, {10.0}, {11});
  CHECK_NOTHROW(Bandwidth{{2.0}}.validate(g));
  CHECK_THROWS_AS(Bandwidth{{0.0}}.validate(g), Error);
  CHECK_THROWS_AS(Bandwidth{{-1.0}}.validate(g), Error);
  CHECK_THROWS_AS(Bandwidth{{10.5}}.validate(g), Error);
  CHECK_THROWS_AS((Bandwidth{{1.0, 1.0}}.validate(g)), Error);
}

TEST_CASE("normalize_domain maps the bounding box to the unit cube") {
  FunctionalDataset data;
  data.dim = 1;
  Sample s;
  s.id = "a";
  for (double x : {0.0, 2.5, 10.0}) {
    s.coords.push_back(x);
    s.values.push_back(x);
  }
  data.samples.push_back(s);
  FunctionalDataset copy = data;
  const AffineMap map = normalize_domain(copy);
  CHECK(copy.samples[0].coords[0] == Catch::Approx(0.0).margin(1e-15));
  CHECK(copy.samples[0].coords[1] == Catch::Approx(0.25).margin(1e-12));
  CHECK(copy.samples[0].coords[2] == Catch::Approx(1.0).margin(1e-15));
  // Round trip through the returned map.
  for (std::size_t j = 0; j < 3; ++j) {
    const double back = map.inverse(0, copy.samples[0].coords[j]);
    CHECK(back == Catch::Approx(data.samples[0].coords[j]).margin(1e-12));
  }

  FunctionalDataset flat;
  flat.dim = 1;
  Sample f;
  f.id = "f";
  f.coords = {3.0, 3.0};
  f.values = {1.0, 2.0};
  flat.samples.push_back(f);
  CHECK_THROWS_AS(normalize_domain(flat), Error);
}

TEST_CASE("binning: observation exactly on a node gets full mass") {
  auto grid = EvaluationGrid::uniform({0.0}, {1.0}, {5});
  FunctionalDataset data;
  data.dim = 1;
  data.samples.push_back({"a", {0.5}, {2.0}});
  auto binned = linear_bin(data, grid);
  CHECK(binned.mass[2] == Catch::Approx(1.0).margin(1e-15));
  CHECK(binned.wvalue[2] == Catch::Approx(2.0).margin(1e-15));
  double total = 0.0;
  for (double m : binned.mass) total += m;
  CHECK(total == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("binning: midpoint splits mass evenly; hull boundary binds to the edge node") {
  auto grid = EvaluationGrid::uniform({0.0}, {1.0}, {5});
  FunctionalDataset data;
  data.dim = 1;
  data.samples.push_back({"a", {0.375, 1.0}, {1.0, 3.0}});
  auto binned = linear_bin(data, grid);
  CHECK(binned.mass[1] == Catch::Approx(0.25).margin(1e-14));  // weight 1/2 split evenly
  CHECK(binned.mass[2] == Catch::Approx(0.25).margin(1e-14));
  CHECK(binned.mass[4] == Catch::Approx(0.5).margin(1e-14));   // boundary: full mass
  CHECK(binned.wvalue[4] == Catch::Approx(1.5).margin(1e-14));
}

TEST_CASE("binning conserves weighted mass and matches the tent-product oracle") {
  auto grid = EvaluationGrid::uniform({0.0, -1.0}, {1.0, 1.0}, {7, 9});
  auto data = random_dataset_2d(5, 20, 20260815);
  auto binned = linear_bin(data, grid, {true, true});

  double total_mass = 0.0, total_value = 0.0;
  for (std::size_t f = 0; f < binned.mass.size(); ++f) {
    total_mass += binned.mass[f];
    total_value += binned.wvalue[f];
  }
  double expect_value = 0.0;
  for (const auto& s : data.samples)
    for (double y : s.values) expect_value += y / static_cast<double>(s.n_obs());
  CHECK(total_mass == Catch::Approx(5.0).epsilon(1e-12));
  CHECK(total_value == Catch::Approx(expect_value).epsilon(1e-12));

  // Node-by-node agreement with the independent tent-product oracle.
  std::vector<Index> node(2);
  for (Index f = 0; f < grid.size(); ++f) {
    grid.multi_index(f, node);
    double oracle = 0.0;
    for (const auto& s : data.samples)
      for (std::size_t j = 0; j < s.n_obs(); ++j)
        oracle += tent_mass(grid, s.coord(j, 2), node) / static_cast<double>(s.n_obs());
    CHECK(binned.mass[static_cast<std::size_t>(f)] == Catch::Approx(oracle).margin(1e-12));
  }

  // Per-sample grids conserve the unweighted counts.
  for (const auto& sg : binned.per_sample) {
    double m = 0.0;
    for (double v : sg.mass) m += v;
    CHECK(m == Catch::Approx(20.0).epsilon(1e-12));
  }
}

TEST_CASE("binning rejects observations outside the grid hull") {
  auto grid = EvaluationGrid::uniform({0.0}, {1.0}, {5});
  FunctionalDataset data;
  data.dim = 1;
  data.samples.push_back({"a", {1.25}, {1.0}});
  CHECK_THROWS_AS(linear_bin(data, grid), Error);
  try {
    linear_bin(data, grid);
  } catch (const Error& e) {
    CHECK(e.name() == "ObservationOutsideGrid");
    CHECK(e.error_class() == ErrorClass::Config);
  }
}

TEST_CASE("covariance-path binning: two on-node observations enumerate exactly") {
  auto grid = EvaluationGrid::uniform({0.0}, {1.0}, {5});
  FunctionalDataset data;
  data.dim = 1;
  data.samples.push_back({"a", {0.25, 0.75}, {2.0, 5.0}});
  auto binned = linear_bin(data, grid, {true, true});
  REQUIRE(binned.per_sample.size() == 1);
  const auto& sg = binned.per_sample[0];
  const double pw = 1.0 / (2.0 * 1.0);
  CHECK(sg.pair_weight == Catch::Approx(pw).epsilon(1e-15));
  CHECK(sg.mass[1] == Catch::Approx(1.0));
  CHECK(sg.mass[3] == Catch::Approx(1.0));
  CHECK(sg.value[1] == Catch::Approx(2.0));
  CHECK(sg.value[3] == Catch::Approx(5.0));

  // Self-pair band: only the zero offset at each occupied node, pair weight
  // applied, squared values in the value band.
  const std::size_t codes = binned.offset_codes();
  REQUIRE(codes == 3);
  const std::size_t center = 1;  // offset 0 encodes as 1
  CHECK(binned.diag_mass[1 * codes + center] == Catch::Approx(pw));
  CHECK(binned.diag_mass[3 * codes + center] == Catch::Approx(pw));
  CHECK(binned.diag_value[1 * codes + center] == Catch::Approx(pw * 4.0));
  CHECK(binned.diag_value[3 * codes + center] == Catch::Approx(pw * 25.0));
  double band_total = 0.0;
  for (double v : binned.diag_mass) band_total += v;
  CHECK(band_total == Catch::Approx(2.0 * pw).epsilon(1e-12));
}

TEST_CASE("multilinear interpolation reproduces node values and affine fields") {
  auto grid = EvaluationGrid::uniform({0.0, 0.0}, {1.0, 1.0}, {5, 5});
  std::vector<double> vals(static_cast<std::size_t>(grid.size()));
  std::vector<Index> idx(2);
  for (Index f = 0; f < grid.size(); ++f) {
    grid.multi_index(f, idx);
    const double x = grid.node(0, idx[0]), y = grid.node(1, idx[1]);
    vals[static_cast<std::size_t>(f)] = 2.0 + 3.0 * x - 1.5 * y;
  }
  const double p[2] = {0.3, 0.61};
  CHECK(interp_multilinear(grid, vals, p) == Catch::Approx(2.0 + 0.9 - 0.915).margin(1e-12));
  const double onnode[2] = {0.25, 0.75};
  CHECK(interp_multilinear(grid, vals, onnode) == Catch::Approx(2.0 + 0.75 - 1.125).margin(1e-12));
  const double outside[2] = {1.2, 0.5};
  CHECK_THROWS_AS(interp_multilinear(grid, vals, outside), Error);
}

TEST_CASE("masked nodes are skipped by interpolation and Riemann sums") {
  std::vector<std::uint8_t> mask = {1, 1, 0, 1};
  EvaluationGrid grid({{0.0, 1.0, 2.0, 3.0}}, mask);
  CHECK(grid.in_mask_count() == 3);
  std::vector<double> vals = {1.0, 1.0, outside_value(), 1.0};
  const double p = 1.5;  // cell with one masked corner: re-weighted to finite one
  CHECK(interp_multilinear(grid, vals, &p) == Catch::Approx(1.0));
  const double integral = riemann_sum(grid, [&](Index f) { return vals[static_cast<std::size_t>(f)]; });
  CHECK(integral == Catch::Approx(3.0));  // 3 in-mask nodes * spacing 1
}

TEST_CASE("deterministic random stream is reproducible and well-scaled") {
  RandomStream a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.normal() == b.normal());
  RandomStream c = RandomStream::substream(42, 7);
  RandomStream d = RandomStream::substream(42, 7);
  for (int i = 0; i < 10; ++i) REQUIRE(c.uniform() == d.uniform());

  RandomStream e(123);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = e.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(sum / n == Catch::Approx(0.0).margin(0.01));
  CHECK(sq / n == Catch::Approx(1.0).margin(0.02));
}
