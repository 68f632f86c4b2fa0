#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dfpca/binning.hpp"
#include "dfpca/conv.hpp"
#include "dfpca/dataset.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/kernel.hpp"
#include "dfpca/local_fit.hpp"
#include "dfpca/parallel.hpp"
#include "dfpca/surface.hpp"

// Binned evaluation of the local linear estimators: kernel-weighted moment
// grids are separable discrete convolutions of the binned arrays, evaluated
// by the deterministic convolution engine, followed by the same per-node
// solve as the direct path. Overlapping-block processing bounds the working
// set; the convolution engine's fixed global tiling makes every block's core
// output bit-identical to the unblocked computation.

namespace dfpca {

/// Which response the binned local linear smoother fits.
enum class MomentTarget { Mean, Squares };

/** @brief Overlapping-block partition of an evaluation grid. */
struct BlockPlan {
  /// Axis-aligned node ranges including halos; their union covers the grid.
  std::vector<Box> blocks;
  /// Declared per-axis overlap width in nodes.
  std::vector<Index> halo;

  /// Core of one block: the block shrunk by the halo on every side that does
  /// not touch the grid boundary. Cores must tile the grid exactly.
  Box core(std::size_t b, const std::vector<Index>& shape) const {
    Box c = blocks[b];
    for (std::size_t k = 0; k < c.dim(); ++k) {
      if (c.lo[k] > 0) c.lo[k] += halo[k];
      if (c.hi[k] < shape[k]) c.hi[k] -= halo[k];
    }
    return c;
  }
};

namespace detail {

/// Stencil radius in nodes for one axis: ceil(h / spacing). Epanechnikov has
/// compact support, so truncating there is exact.
inline Index kernel_radius_nodes(double h, double spacing) {
  return static_cast<Index>(std::ceil(h / spacing));
}

}  // namespace detail

/// Single block spanning the whole grid (the unblocked plan).
inline BlockPlan single_block_plan(const EvaluationGrid& grid, const Bandwidth& h) {
  BlockPlan plan;
  plan.blocks.push_back(Box::full(grid.shape()));
  plan.halo.resize(grid.dim());
  for (std::size_t k = 0; k < grid.dim(); ++k)
    plan.halo[k] = detail::kernel_radius_nodes(h[k], grid.spacing(k));
  return plan;
}

/// Splits axis 0 into `n_blocks` near-equal cores and attaches kernel-radius
/// halos on every axis.
inline BlockPlan make_block_plan(const EvaluationGrid& grid, const Bandwidth& h, Index n_blocks) {
  if (n_blocks < 1) throw err::invalid_argument("block count must be positive");
  const std::vector<Index>& shape = grid.shape();
  n_blocks = std::min(n_blocks, shape[0]);

  BlockPlan plan;
  plan.halo.resize(grid.dim());
  for (std::size_t k = 0; k < grid.dim(); ++k)
    plan.halo[k] = detail::kernel_radius_nodes(h[k], grid.spacing(k));

  for (Index b = 0; b < n_blocks; ++b) {
    const Index lo = shape[0] * b / n_blocks;
    const Index hi = shape[0] * (b + 1) / n_blocks;
    Box blk = Box::full(shape);
    blk.lo[0] = std::max<Index>(0, lo - plan.halo[0]);
    blk.hi[0] = std::min<Index>(shape[0], hi + plan.halo[0]);
    plan.blocks.push_back(std::move(blk));
  }
  return plan;
}

/// Checks plan invariants against a grid and bandwidth: halos at least one
/// kernel radius (HaloTooSmall), cores no smaller than the halo
/// (BlockTooSmall), and cores tiling the grid exactly.
inline void validate_block_plan(const BlockPlan& plan, const EvaluationGrid& grid,
                                const Bandwidth& h) {
  const std::size_t d = grid.dim();
  if (plan.blocks.empty() || plan.halo.size() != d)
    throw err::invalid_argument("block plan does not match the grid dimension");
  for (std::size_t k = 0; k < d; ++k) {
    const Index radius = detail::kernel_radius_nodes(h[k], grid.spacing(k));
    if (plan.halo[k] < radius)
      throw err::halo_too_small("halo of " + std::to_string(plan.halo[k]) + " node(s) on axis " +
                                std::to_string(k) + " is below the kernel radius of " +
                                std::to_string(radius));
  }

  const std::vector<Index>& shape = grid.shape();
  Index covered = 0;
  std::vector<Box> cores;
  for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
    const Box& blk = plan.blocks[b];
    if (blk.dim() != d) throw err::invalid_argument("block dimension mismatch");
    Box c = plan.core(b, shape);
    for (std::size_t k = 0; k < d; ++k) {
      if (blk.lo[k] < 0 || blk.hi[k] > shape[k] || blk.lo[k] >= blk.hi[k])
        throw err::invalid_argument("block range outside the grid");
      if (c.hi[k] - c.lo[k] < plan.halo[k])
        throw err::block_too_small("block " + std::to_string(b) + " core extent " +
                                   std::to_string(c.hi[k] - c.lo[k]) + " on axis " +
                                   std::to_string(k) + " is smaller than its halo of " +
                                   std::to_string(plan.halo[k]));
    }
    covered += c.volume();
    cores.push_back(std::move(c));
  }
  for (std::size_t a = 0; a < cores.size(); ++a)
    for (std::size_t b = a + 1; b < cores.size(); ++b) {
      bool separated = false;
      for (std::size_t k = 0; k < d; ++k)
        if (cores[a].hi[k] <= cores[b].lo[k] || cores[b].hi[k] <= cores[a].lo[k]) {
          separated = true;
          break;
        }
      if (!separated) throw err::invalid_argument("block cores overlap");
    }
  if (covered != grid.size())
    throw err::invalid_argument("block cores do not tile the grid exactly");
}

namespace detail {

/// Copies a sub-box of a row-major array into a contiguous box-major buffer.
inline void copy_box_from(const double* full, const std::vector<Index>& shape, const Box& box,
                          double* out) {
  const std::size_t d = shape.size();
  const std::vector<Index> strides = strides_of(shape);
  const Index run = box.extent(d - 1);
  Index rows = 1;
  for (std::size_t k = 0; k + 1 < d; ++k) rows *= box.extent(k);
  std::vector<Index> idx(box.lo);
  for (Index r = 0; r < rows; ++r) {
    Index base = 0;
    for (std::size_t k = 0; k < d; ++k) base += idx[k] * strides[k];
    std::copy(full + base, full + base + run, out + r * run);
    for (std::size_t k = d - 1; k-- > 0;) {
      if (++idx[k] < box.hi[k]) break;
      idx[k] = box.lo[k];
    }
  }
}

/// Scatters a contiguous box-major buffer into a row-major full array.
inline void copy_box_to(double* full, const std::vector<Index>& shape, const Box& box,
                        const double* in) {
  const std::size_t d = shape.size();
  const std::vector<Index> strides = strides_of(shape);
  const Index run = box.extent(d - 1);
  Index rows = 1;
  for (std::size_t k = 0; k + 1 < d; ++k) rows *= box.extent(k);
  std::vector<Index> idx(box.lo);
  for (Index r = 0; r < rows; ++r) {
    Index base = 0;
    for (std::size_t k = 0; k < d; ++k) base += idx[k] * strides[k];
    std::copy(in + r * run, in + (r + 1) * run, full + base);
    for (std::size_t k = d - 1; k-- > 0;) {
      if (++idx[k] < box.hi[k]) break;
      idx[k] = box.lo[k];
    }
  }
}

/// One convolution engine per moment multi-index |r| <= 2, all sharing the
/// same per-axis stencil radius (only the tap values differ with the order).
struct MomentEngineBank {
  MomentBasis basis{0};
  std::vector<std::unique_ptr<SeparableConv>> engines;

  MomentEngineBank(const std::vector<double>& h, const std::vector<double>& spacing,
                   const std::vector<Index>& shape)
      : basis(h.size()) {
    const std::size_t p = h.size();
    auto taps_for = [&](std::size_t k, int order) {
      const Index radius = kernel_radius_nodes(h[k], spacing[k]);
      std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1), 0.0);
      for (Index o = -radius; o <= radius; ++o) {
        const double u = -static_cast<double>(o) * spacing[k];
        taps[static_cast<std::size_t>(o + radius)] = kernel_axis(u, h[k]) * std::pow(u, order);
      }
      return taps;
    };
    auto add_engine = [&](const std::vector<int>& orders) {
      std::vector<std::vector<double>> taps;
      taps.reserve(p);
      for (std::size_t k = 0; k < p; ++k) taps.push_back(taps_for(k, orders[k]));
      engines.push_back(std::make_unique<SeparableConv>(std::move(taps), shape));
    };

    std::vector<int> orders(p, 0);
    add_engine(orders);
    for (std::size_t k = 0; k < p; ++k) {
      orders.assign(p, 0);
      orders[k] = 1;
      add_engine(orders);
    }
    for (std::size_t k = 0; k < p; ++k)
      for (std::size_t l = k; l < p; ++l) {
        orders.assign(p, 0);
        orders[k] += 1;
        orders[l] += 1;
        add_engine(orders);
      }
  }
};

/// Direct moment gather over binned nodes near one target node at an
/// enlarged bandwidth; backs the empty-window fallback of the binned path.
/// Depends only on the node and the binned arrays, never on the block, so
/// fallback values are block-invariant.
inline bool gather_binned_equations(const EvaluationGrid& grid, const std::vector<double>& mass,
                                    const std::vector<double>& value,
                                    const std::vector<Index>& node, const Bandwidth& bw,
                                    double scale, Eigen::MatrixXd& A, Eigen::VectorXd& rhs) {
  const std::size_t d = grid.dim();
  MomentBasis basis(d);
  std::vector<double> S(basis.count(), 0.0), T(basis.count_linear(), 0.0);
  std::vector<double> h(d), u(d);
  Box win{std::vector<Index>(d), std::vector<Index>(d)};
  for (std::size_t k = 0; k < d; ++k) {
    h[k] = bw[k] * scale;
    const Index r = kernel_radius_nodes(h[k], grid.spacing(k));
    win.lo[k] = std::max<Index>(0, node[k] - r);
    win.hi[k] = std::min<Index>(grid.shape()[k], node[k] + r + 1);
  }

  const std::vector<Index>& strides = grid.strides();
  std::vector<Index> m(win.lo);
  bool done = false;
  while (!done) {
    Index flat = 0;
    for (std::size_t k = 0; k < d; ++k) {
      flat += m[k] * strides[k];
      u[k] = static_cast<double>(node[k] - m[k]) * grid.spacing(k);
    }
    const auto f = static_cast<std::size_t>(flat);
    if (mass[f] != 0.0) {
      const double kw = kernel_eval(u.data(), h.data(), d);
      if (kw != 0.0) accumulate_moments(basis, u.data(), kw * mass[f], kw * value[f], S.data(), T.data());
    }
    done = true;
    for (std::size_t k = d; k-- > 0;) {
      if (++m[k] < win.hi[k]) {
        done = false;
        break;
      }
      m[k] = win.lo[k];
    }
  }
  assemble_normal_equations(basis, S.data(), T.data(), A, rhs);
  return S[0] > 0.0;
}

}  // namespace detail

/**
 * @brief Pair-product weight/value grids over the product domain.
 *
 * Entry (s, t) of the weight grid is sum_i 1/(N_i(N_i-1)) M_i(s) M_i(t) minus
 * the binned same-observation band, the exact binned image of the j != l
 * pair sums; the value grid pairs the per-sample value images the same way.
 * Extraction over any sub-box accumulates samples in ascending order with a
 * final band subtraction, so a rebuilt sub-box is bit-identical to slicing a
 * materialized full grid.
 */
class PairGridSource {
 public:
  enum class Mode { Auto, Materialize, Rebuild };

  /// Full pair grids are kept in memory when their footprint stays under this
  /// budget (Mode::Auto); otherwise every extraction rebuilds its box.
  static constexpr std::size_t kMaterializeBudget = 640ull << 20;

  PairGridSource(const BinnedData& binned, Mode mode = Mode::Auto) : binned_(binned) {
    if (!binned.has_covariance_path)
      throw err::invalid_argument("binned data lacks the covariance path");
    const std::size_t d = binned.grid.dim();
    const auto g = static_cast<std::size_t>(binned.grid.size());

    // Per-sample sparse views of the binned mass/value grids, node-ascending.
    samples_.reserve(binned.per_sample.size());
    std::vector<Index> multi(d);
    for (const auto& sg : binned.per_sample) {
      Nonzeros nz;
      nz.pair_weight = sg.pair_weight;
      for (std::size_t f = 0; f < g; ++f) {
        if (sg.mass[f] == 0.0) continue;
        nz.flat.push_back(static_cast<Index>(f));
        binned.grid.multi_index(static_cast<Index>(f), multi);
        nz.multi.insert(nz.multi.end(), multi.begin(), multi.end());
        nz.mass.push_back(sg.mass[f]);
        nz.value.push_back(sg.value[f]);
      }
      samples_.push_back(std::move(nz));
    }

    const std::size_t bytes = 2 * g * g * sizeof(double);
    materialized_ = (mode == Mode::Materialize) || (mode == Mode::Auto && bytes <= kMaterializeBudget);
    if (materialized_) {
      Box all = full_box();
      build_into(all, full_pw_, full_pv_);
    }
  }

  bool materialized() const { return materialized_; }

  Box full_box() const {
    std::vector<Index> shape2 = binned_.grid.shape();
    const std::vector<Index>& s = binned_.grid.shape();
    shape2.insert(shape2.end(), s.begin(), s.end());
    return Box::full(shape2);
  }

  /// Fills pw/pv (row-major within `box`, a 2d-dimensional node range) with
  /// the pair-product grids restricted to the box.
  void extract(const Box& box, std::vector<double>& pw, std::vector<double>& pv) const {
    if (materialized_) {
      std::vector<Index> shape2 = full_box().hi;
      pw.resize(static_cast<std::size_t>(box.volume()));
      pv.resize(static_cast<std::size_t>(box.volume()));
      detail::copy_box_from(full_pw_.data(), shape2, box, pw.data());
      detail::copy_box_from(full_pv_.data(), shape2, box, pv.data());
      return;
    }
    build_into(box, pw, pv);
  }

 private:
  struct Nonzeros {
    double pair_weight = 0.0;
    std::vector<Index> flat;
    std::vector<Index> multi;  // flat.size() * d node coordinates
    std::vector<double> mass;
    std::vector<double> value;
  };

  void build_into(const Box& box, std::vector<double>& pw, std::vector<double>& pv) const {
    const std::size_t d = binned_.grid.dim();
    pw.assign(static_cast<std::size_t>(box.volume()), 0.0);
    pv.assign(static_cast<std::size_t>(box.volume()), 0.0);
    std::vector<Index> ext(2 * d);
    for (std::size_t k = 0; k < 2 * d; ++k) ext[k] = box.extent(k);
    const std::vector<Index> strides = detail::strides_of(ext);

    std::vector<Index> off_a, off_b;
    std::vector<double> m_a, v_a, m_b, v_b;
    for (const Nonzeros& nz : samples_) {
      off_a.clear(); m_a.clear(); v_a.clear();
      off_b.clear(); m_b.clear(); v_b.clear();
      const std::size_t nnz = nz.flat.size();
      for (std::size_t e = 0; e < nnz; ++e) {
        const Index* mu = nz.multi.data() + e * d;
        Index oa = 0, ob = 0;
        bool in_a = true, in_b = true;
        for (std::size_t k = 0; k < d; ++k) {
          if (mu[k] < box.lo[k] || mu[k] >= box.hi[k]) in_a = false;
          if (mu[k] < box.lo[d + k] || mu[k] >= box.hi[d + k]) in_b = false;
          if (in_a) oa += (mu[k] - box.lo[k]) * strides[k];
          if (in_b) ob += (mu[k] - box.lo[d + k]) * strides[d + k];
        }
        if (in_a) {
          off_a.push_back(oa);
          m_a.push_back(nz.mass[e]);
          v_a.push_back(nz.value[e]);
        }
        if (in_b) {
          off_b.push_back(ob);
          m_b.push_back(nz.mass[e]);
          v_b.push_back(nz.value[e]);
        }
      }
      for (std::size_t a = 0; a < off_a.size(); ++a)
        for (std::size_t b = 0; b < off_b.size(); ++b) {
          const auto at = static_cast<std::size_t>(off_a[a] + off_b[b]);
          pw[at] += nz.pair_weight * m_a[a] * m_b[b];
          pv[at] += nz.pair_weight * v_a[a] * v_b[b];
        }
    }

    // Same-observation correction: one subtraction per banded entry, after
    // all sample contributions (identical order in every extraction).
    const std::size_t codes = binned_.offset_codes();
    const auto g = static_cast<std::size_t>(binned_.grid.size());
    std::vector<Index> multi(d);
    std::vector<int> offs(d);
    for (std::size_t u = 0; u < g; ++u) {
      bool decoded = false;
      for (std::size_t code = 0; code < codes; ++code) {
        const double dm = binned_.diag_mass[u * codes + code];
        const double dv = binned_.diag_value[u * codes + code];
        if (dm == 0.0 && dv == 0.0) continue;
        if (!decoded) {
          binned_.grid.multi_index(static_cast<Index>(u), multi);
          decoded = true;
        }
        detail::decode_offset(code, d, offs);
        Index at = 0;
        bool inside = true;
        for (std::size_t k = 0; k < d && inside; ++k) {
          const Index a_k = multi[k];
          const Index b_k = multi[k] + offs[k];
          if (a_k < box.lo[k] || a_k >= box.hi[k] || b_k < box.lo[d + k] || b_k >= box.hi[d + k])
            inside = false;
          else
            at += (a_k - box.lo[k]) * strides[k] + (b_k - box.lo[d + k]) * strides[d + k];
        }
        if (!inside) continue;
        pw[static_cast<std::size_t>(at)] -= dm;
        pv[static_cast<std::size_t>(at)] -= dv;
      }
    }
  }

  const BinnedData& binned_;
  std::vector<Nonzeros> samples_;
  bool materialized_ = false;
  std::vector<double> full_pw_, full_pv_;
};

namespace detail {

/// Shared solve stage of the binned smoothers: assembles per-node systems
/// from box-major moment arrays (one array per moment index) and runs the
/// ridged local solve with the enlargement fallback ladder.
inline void solve_binned_box(
    const MomentBasis& basis, const std::vector<std::vector<double>>& S,
    const std::vector<std::vector<double>>& T, Index count,
    const std::function<bool(Index)>& in_mask,
    const std::function<bool(Index, double, Eigen::MatrixXd&, Eigen::VectorXd&)>& gather,
    const std::function<void(Index, double)>& emit, const std::string& who) {
  const std::size_t nm = basis.count();
  const std::size_t nl = basis.count_linear();
  std::atomic<Index> empty_nodes{0};
  parallel_for(static_cast<std::size_t>(count), 4096, [&](std::size_t b, std::size_t e) {
    Eigen::MatrixXd A;
    Eigen::VectorXd rhs;
    std::vector<double> S_loc(nm), T_loc(nl);
    for (std::size_t f = b; f < e; ++f) {
      const auto local = static_cast<Index>(f);
      if (!in_mask(local)) continue;
      for (std::size_t i = 0; i < nm; ++i) S_loc[i] = S[i][f];
      for (std::size_t i = 0; i < nl; ++i) T_loc[i] = T[i][f];
      assemble_normal_equations(basis, S_loc.data(), T_loc.data(), A, rhs);
      LocalSolve sol = solve_local(A, rhs);
      double scale = 1.0;
      for (int r = 0; r < kWindowRetries && sol.status == FitStatus::Empty; ++r) {
        scale *= kWindowGrowth;
        if (!gather(local, scale, A, rhs)) continue;
        sol = solve_local(A, rhs);
      }
      if (sol.status == FitStatus::Empty) {
        empty_nodes.fetch_add(1);
        continue;
      }
      emit(local, sol.b0);
    }
  });
  if (empty_nodes.load() > 0)
    throw err::bandwidth_too_small(
        who + ": " + std::to_string(empty_nodes.load()) +
        " node(s) had no binned mass in the kernel window (AllWeightsZero) after " +
        std::to_string(kWindowRetries) + " window enlargements");
}

}  // namespace detail

/**
 * @brief Binned local linear smoother for mean or squared responses.
 *
 * Numerically equal to the direct estimator applied to the binned pseudo-
 * observations; block plans only bound memory, never change core outputs.
 */
inline SurfaceEstimate fft_local_linear(const BinnedData& binned, const EvaluationGrid& grid,
                                        const Bandwidth& h, MomentTarget target,
                                        const BlockPlan& plan) {
  const std::size_t d = grid.dim();
  grid.require_equispaced("binned smoothing");
  h.validate(grid);
  if (!binned.has_mean_path) throw err::invalid_argument("binned data lacks the mean path");
  if (binned.grid.shape() != grid.shape())
    throw err::invalid_argument("binned data does not conform to the grid");
  validate_block_plan(plan, grid, h);

  std::vector<double> spacing(d);
  for (std::size_t k = 0; k < d; ++k) spacing[k] = grid.spacing(k);
  detail::MomentEngineBank bank(h.h, spacing, grid.shape());
  const std::size_t nm = bank.basis.count();
  const std::size_t nl = bank.basis.count_linear();

  const std::vector<double>& value = target == MomentTarget::Mean ? binned.wvalue : binned.wsquare;
  SurfaceEstimate out;
  out.grid = grid;
  out.kind = target == MomentTarget::Mean ? SurfaceKind::Mean : SurfaceKind::DiagPlusNoise;
  out.values.assign(static_cast<std::size_t>(grid.size()), outside_value());

  std::vector<double> mass_in, value_in;
  std::vector<std::vector<double>> S(nm), T(nl);
  for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
    const Box core = plan.core(b, grid.shape());
    const Box in_box = bank.engines[0]->required_input_box(core);
    mass_in.resize(static_cast<std::size_t>(in_box.volume()));
    value_in.resize(static_cast<std::size_t>(in_box.volume()));
    detail::copy_box_from(binned.mass.data(), grid.shape(), in_box, mass_in.data());
    detail::copy_box_from(value.data(), grid.shape(), in_box, value_in.data());

    const auto core_n = static_cast<std::size_t>(core.volume());
    for (std::size_t i = 0; i < nm; ++i) {
      S[i].assign(core_n, 0.0);
      bank.engines[i]->run(mass_in.data(), in_box, S[i].data(), core);
    }
    for (std::size_t i = 0; i < nl; ++i) {
      T[i].assign(core_n, 0.0);
      bank.engines[i]->run(value_in.data(), in_box, T[i].data(), core);
    }

    // Map local (core-box) indices to global nodes for masking and output.
    std::vector<Index> core_ext(d);
    for (std::size_t k = 0; k < d; ++k) core_ext[k] = core.extent(k);
    const std::vector<Index> core_str = detail::strides_of(core_ext);
    auto global_node = [&](Index local, std::vector<Index>& node) {
      node.resize(d);
      for (std::size_t k = 0; k < d; ++k) {
        node[k] = core.lo[k] + (local / core_str[k]) % core_ext[k];
      }
    };
    auto global_flat = [&](Index local) {
      Index flat = 0;
      for (std::size_t k = 0; k < d; ++k)
        flat += (core.lo[k] + (local / core_str[k]) % core_ext[k]) * grid.strides()[k];
      return flat;
    };

    detail::solve_binned_box(
        bank.basis, S, T, core.volume(),
        [&](Index local) { return grid.in_mask(global_flat(local)); },
        [&](Index local, double scale, Eigen::MatrixXd& A, Eigen::VectorXd& rhs) {
          std::vector<Index> node;  // local: the fallback may run concurrently
          global_node(local, node);
          return detail::gather_binned_equations(grid, binned.mass, value, node, h, scale, A, rhs);
        },
        [&](Index local, double v) { out.values[static_cast<std::size_t>(global_flat(local))] = v; },
        "binned local linear smoother");
  }
  return out;
}

inline SurfaceEstimate fft_local_linear(const BinnedData& binned, const EvaluationGrid& grid,
                                        const Bandwidth& h, MomentTarget target) {
  return fft_local_linear(binned, grid, h, target, single_block_plan(grid, h));
}

/**
 * @brief Binned covariance smoother on the product grid.
 *
 * Builds the pair-product moment grids from per-sample binned images minus
 * the same-observation band, convolves with the 2d product-kernel stencils,
 * solves the per-node (2d+1) systems, subtracts the mean product, and
 * symmetrizes. Block plans bound memory; cores are bit-invariant.
 */
inline SurfaceEstimate fft_covariance(const BinnedData& binned, const EvaluationGrid& grid,
                                      const Bandwidth& h, const SurfaceEstimate& mean,
                                      const BlockPlan& plan,
                                      PairGridSource::Mode mode = PairGridSource::Mode::Auto) {
  const std::size_t d = grid.dim();
  grid.require_equispaced("binned covariance smoothing");
  h.validate(grid);
  if (!binned.has_covariance_path)
    throw err::invalid_argument("binned data lacks the covariance path");
  if (binned.grid.shape() != grid.shape())
    throw err::invalid_argument("binned data does not conform to the grid");
  if (binned.per_sample.empty())
    throw err::no_pairs("covariance smoothing needs at least one sample with two observations");
  if (mean.values.size() != static_cast<std::size_t>(grid.size()))
    throw err::invalid_argument("mean surface does not conform to the grid");
  validate_block_plan(plan, grid, h);

  PairGridSource source(binned, mode);

  std::vector<double> spacing2(2 * d), h2(2 * d);
  std::vector<Index> shape2 = grid.shape();
  {
    const std::vector<Index>& s = grid.shape();
    shape2.insert(shape2.end(), s.begin(), s.end());
    for (std::size_t k = 0; k < d; ++k) {
      spacing2[k] = spacing2[d + k] = grid.spacing(k);
      h2[k] = h2[d + k] = h[k];
    }
  }
  detail::MomentEngineBank bank(h2, spacing2, shape2);
  const std::size_t nm = bank.basis.count();
  const std::size_t nl = bank.basis.count_linear();

  const auto g = static_cast<std::size_t>(grid.size());
  SurfaceEstimate out;
  out.grid = grid;
  out.kind = SurfaceKind::Covariance;
  out.values.assign(g * g, outside_value());

  const std::vector<Index>& shape = grid.shape();
  std::vector<double> pw_in, pv_in;
  std::vector<std::vector<double>> S(nm), T(nl);
  for (std::size_t bs = 0; bs < plan.blocks.size(); ++bs) {
    const Box core_s = plan.core(bs, shape);
    for (std::size_t bt = 0; bt < plan.blocks.size(); ++bt) {
      const Box core_t = plan.core(bt, shape);
      Box core2{core_s.lo, core_s.hi};
      core2.lo.insert(core2.lo.end(), core_t.lo.begin(), core_t.lo.end());
      core2.hi.insert(core2.hi.end(), core_t.hi.begin(), core_t.hi.end());

      const Box in_box = bank.engines[0]->required_input_box(core2);
      source.extract(in_box, pw_in, pv_in);

      const auto core_n = static_cast<std::size_t>(core2.volume());
      for (std::size_t i = 0; i < nm; ++i) {
        S[i].assign(core_n, 0.0);
        bank.engines[i]->run(pw_in.data(), in_box, S[i].data(), core2);
      }
      for (std::size_t i = 0; i < nl; ++i) {
        T[i].assign(core_n, 0.0);
        bank.engines[i]->run(pv_in.data(), in_box, T[i].data(), core2);
      }

      std::vector<Index> core_ext(2 * d);
      for (std::size_t k = 0; k < 2 * d; ++k) core_ext[k] = core2.extent(k);
      const std::vector<Index> core_str = detail::strides_of(core_ext);
      auto pair_nodes = [&](Index local, Index& s_flat, Index& t_flat) {
        s_flat = 0;
        t_flat = 0;
        for (std::size_t k = 0; k < d; ++k) {
          s_flat += (core2.lo[k] + (local / core_str[k]) % core_ext[k]) * grid.strides()[k];
          t_flat +=
              (core2.lo[d + k] + (local / core_str[d + k]) % core_ext[d + k]) * grid.strides()[k];
        }
      };

      detail::solve_binned_box(
          bank.basis, S, T, core2.volume(),
          [&](Index local) {
            Index s_flat, t_flat;
            pair_nodes(local, s_flat, t_flat);
            return grid.in_mask(s_flat) && grid.in_mask(t_flat);
          },
          [&](Index local, double scale, Eigen::MatrixXd& A, Eigen::VectorXd& rhs) {
            // Window extraction around one pair node; values are independent
            // of the requesting block, keeping the fallback block-invariant.
            detail::MomentBasis basis2(2 * d);
            std::vector<Index> node(2 * d);
            for (std::size_t k = 0; k < 2 * d; ++k)
              node[k] = core2.lo[k] + (local / core_str[k]) % core_ext[k];
            Box win{std::vector<Index>(2 * d), std::vector<Index>(2 * d)};
            std::vector<double> hs(2 * d);
            for (std::size_t k = 0; k < 2 * d; ++k) {
              hs[k] = h2[k] * scale;
              const Index r = detail::kernel_radius_nodes(hs[k], spacing2[k]);
              win.lo[k] = std::max<Index>(0, node[k] - r);
              win.hi[k] = std::min<Index>(shape2[k], node[k] + r + 1);
            }
            std::vector<double> wpw, wpv;
            source.extract(win, wpw, wpv);
            std::vector<double> Sg(basis2.count(), 0.0), Tg(basis2.count_linear(), 0.0);
            std::vector<double> u(2 * d);
            std::vector<Index> m(win.lo);
            std::size_t at = 0;
            bool done = false;
            while (!done) {
              for (std::size_t k = 0; k < 2 * d; ++k)
                u[k] = static_cast<double>(node[k] - m[k]) * spacing2[k];
              if (wpw[at] != 0.0 || wpv[at] != 0.0) {
                const double kw = kernel_eval(u.data(), hs.data(), 2 * d);
                if (kw != 0.0)
                  detail::accumulate_moments(basis2, u.data(), kw * wpw[at], kw * wpv[at],
                                             Sg.data(), Tg.data());
              }
              ++at;
              done = true;
              for (std::size_t k = 2 * d; k-- > 0;) {
                if (++m[k] < win.hi[k]) {
                  done = false;
                  break;
                }
                m[k] = win.lo[k];
              }
            }
            detail::assemble_normal_equations(basis2, Sg.data(), Tg.data(), A, rhs);
            return Sg[0] > 0.0;
          },
          [&](Index local, double v) {
            Index s_flat, t_flat;
            pair_nodes(local, s_flat, t_flat);
            out.values[static_cast<std::size_t>(s_flat * static_cast<Index>(g) + t_flat)] = v;
          },
          "binned covariance smoother");
    }
  }

  // Center by the mean product, then symmetrize; both are per-entry passes
  // over the stitched full surface, identical for every block plan.
  for (std::size_t a = 0; a < g; ++a) {
    if (!grid.in_mask(static_cast<Index>(a))) continue;
    for (std::size_t b = 0; b < g; ++b) {
      if (!grid.in_mask(static_cast<Index>(b))) continue;
      out.values[a * g + b] -= mean.values[a] * mean.values[b];
    }
  }
  for (std::size_t a = 0; a < g; ++a)
    for (std::size_t b = a + 1; b < g; ++b) {
      if (is_outside(out.values[a * g + b])) continue;
      const double avg = 0.5 * (out.values[a * g + b] + out.values[b * g + a]);
      out.values[a * g + b] = avg;
      out.values[b * g + a] = avg;
    }
  return out;
}

inline SurfaceEstimate fft_covariance(const BinnedData& binned, const EvaluationGrid& grid,
                                      const Bandwidth& h, const SurfaceEstimate& mean,
                                      PairGridSource::Mode mode = PairGridSource::Mode::Auto) {
  return fft_covariance(binned, grid, h, mean, single_block_plan(grid, h), mode);
}

/// Runs the binned mean/squares smoother per block and stitches cores.
inline SurfaceEstimate blockwise_apply(const BlockPlan& plan, const BinnedData& binned,
                                       const EvaluationGrid& grid, const Bandwidth& h,
                                       MomentTarget target) {
  return fft_local_linear(binned, grid, h, target, plan);
}

/// Runs the binned covariance smoother per block pair and stitches cores.
inline SurfaceEstimate blockwise_apply(const BlockPlan& plan, const BinnedData& binned,
                                       const EvaluationGrid& grid, const Bandwidth& h,
                                       const SurfaceEstimate& mean) {
  return fft_covariance(binned, grid, h, mean, plan);
}

}  // namespace dfpca
