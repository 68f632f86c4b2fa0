#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/parallel.hpp"

// Deterministic separable discrete convolution over a d-dimensional grid.
//
// The engine is built so that computing any sub-box of the output yields
// bit-identical values to computing the full grid and slicing. Every choice
// that affects floating-point evaluation order is fixed globally, never per
// request:
//   * each axis uses either a direct sliding dot product (narrow stencils) or
//     overlap-add FFT (wide stencils), decided from the stencil width alone;
//   * FFT tiles live on a fixed global lattice anchored at input index 0, so a
//     sub-box computation processes exactly the same tiles, in the same
//     ascending order, as the full computation;
//   * FFTW plans are created with FFTW_ESTIMATE (heuristic, measurement-free
//     and therefore reproducible) and FFTW_UNALIGNED (no alignment-dependent
//     code paths).
// Inputs are zero-extended beyond the grid.

namespace dfpca {
namespace detail {

/// Smallest 5-smooth number (2^a 3^b 5^c) >= x; FFT-friendly transform size.
inline Index next_fast_size(Index x) {
  if (x <= 1) return 1;
  for (Index n = x;; ++n) {
    Index m = n;
    while (m % 2 == 0) m /= 2;
    while (m % 3 == 0) m /= 3;
    while (m % 5 == 0) m /= 5;
    if (m == 1) return n;
  }
}

inline Index floor_div(Index a, Index b) {
  Index q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

/// Serializes FFTW plan creation/destruction, which is not thread-safe.
inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}

/// Per-thread workspace for the FFT path of one axis.
struct FftScratch {
  std::vector<double> real;
  std::vector<std::complex<double>> spec;
  std::vector<double> line_in, line_out;
};

}  // namespace detail

/// Stencils at or above this many taps run through the FFT path.
inline constexpr Index kFftTapThreshold = 33;

/** @brief One axis of a separable convolution: out[j] = sum_o taps[o+R] * in[j+o]. */
class AxisConv {
 public:
  /// taps has odd length 2R+1 covering offsets -R..R; n is the axis extent.
  AxisConv(std::vector<double> taps, Index n)
      : taps_(std::move(taps)), n_(n) {
    if (taps_.empty() || taps_.size() % 2 == 0)
      throw err::invalid_argument("stencil must have odd length");
    if (n_ < 1) throw err::invalid_argument("axis extent must be positive");
    radius_ = static_cast<Index>(taps_.size() / 2);
    fft_ = static_cast<Index>(taps_.size()) >= kFftTapThreshold;
    if (!fft_) return;

    // Fixed global tile lattice: tile width grows with the stencil so the
    // padded transform stays efficient, but never depends on the request.
    tile_ = std::max<Index>(64, detail::next_fast_size(2 * radius_));
    fft_len_ = detail::next_fast_size(tile_ + 2 * radius_);
    const auto F = static_cast<std::size_t>(fft_len_);

    // Spectrum of the reversed taps, pre-scaled by 1/F so that the inverse
    // transform lands directly on the convolution values.
    std::vector<double> g(F, 0.0);
    for (std::size_t i = 0; i < taps_.size(); ++i) g[i] = taps_[taps_.size() - 1 - i];
    spectrum_.assign(F / 2 + 1, {0.0, 0.0});
    std::vector<double> in(F, 0.0);
    std::vector<std::complex<double>> out(F / 2 + 1);
    {
      std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
      fwd_ = fftw_plan_dft_r2c_1d(static_cast<int>(fft_len_), in.data(),
                                  reinterpret_cast<fftw_complex*>(out.data()),
                                  FFTW_ESTIMATE | FFTW_UNALIGNED);
      inv_ = fftw_plan_dft_c2r_1d(static_cast<int>(fft_len_),
                                  reinterpret_cast<fftw_complex*>(out.data()), in.data(),
                                  FFTW_ESTIMATE | FFTW_UNALIGNED);
      if (fwd_ == nullptr || inv_ == nullptr)
        throw err::invalid_argument("FFT plan creation failed");
    }
    std::copy(g.begin(), g.end(), in.begin());
    fftw_execute_dft_r2c(fwd_, in.data(), reinterpret_cast<fftw_complex*>(out.data()));
    const double scale = 1.0 / static_cast<double>(fft_len_);
    for (std::size_t f = 0; f < spectrum_.size(); ++f) spectrum_[f] = out[f] * scale;
  }

  AxisConv(const AxisConv&) = delete;
  AxisConv& operator=(const AxisConv&) = delete;

  ~AxisConv() {
    if (fwd_ != nullptr || inv_ != nullptr) {
      std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
      if (fwd_ != nullptr) fftw_destroy_plan(fwd_);
      if (inv_ != nullptr) fftw_destroy_plan(inv_);
    }
  }

  Index radius() const { return radius_; }
  Index extent() const { return n_; }
  bool uses_fft() const { return fft_; }

  /// Input index range needed to produce outputs [a, b), clipped to the axis.
  /// FFT stencils snap to the global tile lattice so sub-box requests consume
  /// whole tiles.
  std::pair<Index, Index> required_input(Index a, Index b) const {
    if (b <= a) return {0, 0};
    Index lo, hi;
    if (fft_) {
      const Index t_lo = detail::floor_div(a - radius_, tile_);
      const Index t_hi = detail::floor_div(b - 1 + radius_, tile_);
      lo = t_lo * tile_;
      hi = (t_hi + 1) * tile_;
    } else {
      lo = a - radius_;
      hi = b + radius_;
    }
    return {std::max<Index>(0, lo), std::min(n_, hi)};
  }

  void ensure_scratch(detail::FftScratch& s) const {
    if (!fft_) return;
    const auto F = static_cast<std::size_t>(fft_len_);
    if (s.real.size() < F) s.real.assign(F, 0.0);
    if (s.spec.size() < F / 2 + 1) s.spec.assign(F / 2 + 1, {0.0, 0.0});
  }

  /// Convolve one line. `in` holds input positions [in_lo, in_hi) (a superset
  /// of required_input(a, b) intersected with the axis); `out` receives
  /// positions [a, b). Positions outside [0, extent) count as zero.
  void run_line(const double* in, Index in_lo, Index in_hi, double* out, Index a, Index b,
                detail::FftScratch& scratch) const {
    if (b <= a) return;
    if (!fft_) {
      for (Index j = a; j < b; ++j) {
        double acc = 0.0;
        const Index o_lo = std::max(-radius_, in_lo - j);
        const Index o_hi = std::min(radius_, in_hi - 1 - j);
        for (Index o = o_lo; o <= o_hi; ++o)
          acc += taps_[static_cast<std::size_t>(o + radius_)] * in[j + o - in_lo];
        out[j - a] = acc;
      }
      return;
    }

    ensure_scratch(scratch);
    std::fill(out, out + (b - a), 0.0);
    const Index t_lo = std::max<Index>(0, detail::floor_div(a - radius_, tile_));
    const Index t_hi = std::min(detail::floor_div(n_ - 1, tile_),
                                detail::floor_div(b - 1 + radius_, tile_));
    const auto F = static_cast<std::size_t>(fft_len_);
    for (Index t = t_lo; t <= t_hi; ++t) {
      const Index s0 = t * tile_;
      std::fill(scratch.real.begin(), scratch.real.begin() + static_cast<std::ptrdiff_t>(F), 0.0);
      const Index lo = std::max(s0, in_lo);
      const Index hi = std::min({s0 + tile_, in_hi, n_});
      for (Index m = lo; m < hi; ++m) scratch.real[static_cast<std::size_t>(m - s0)] = in[m - in_lo];
      fftw_execute_dft_r2c(fwd_, scratch.real.data(),
                           reinterpret_cast<fftw_complex*>(scratch.spec.data()));
      for (std::size_t f = 0; f < F / 2 + 1; ++f) scratch.spec[f] *= spectrum_[f];
      fftw_execute_dft_c2r(inv_, reinterpret_cast<fftw_complex*>(scratch.spec.data()),
                           scratch.real.data());
      // Tile t contributes to outputs [s0 - R, s0 + tile + R); accumulate the
      // part inside [a, b). Tiles are visited in ascending order in every
      // request, so partial sums associate identically.
      const Index j_lo = std::max(a, s0 - radius_);
      const Index j_hi = std::min(b, s0 + tile_ + radius_);
      for (Index j = j_lo; j < j_hi; ++j)
        out[j - a] += scratch.real[static_cast<std::size_t>(j - (s0 - radius_))];
    }
  }

 private:
  std::vector<double> taps_;
  Index n_ = 0;
  Index radius_ = 0;
  bool fft_ = false;
  Index tile_ = 0;
  Index fft_len_ = 0;
  std::vector<std::complex<double>> spectrum_;
  fftw_plan fwd_ = nullptr;
  fftw_plan inv_ = nullptr;
};

/** @brief Separable d-axis convolution over a row-major grid, last axis fastest. */
class SeparableConv {
 public:
  /// One stencil per axis; shape gives the grid extents.
  SeparableConv(std::vector<std::vector<double>> taps, std::vector<Index> shape)
      : shape_(std::move(shape)) {
    if (taps.size() != shape_.size())
      throw err::invalid_argument("one stencil per axis required");
    axes_.reserve(taps.size());
    for (std::size_t k = 0; k < taps.size(); ++k)
      axes_.push_back(std::make_unique<AxisConv>(std::move(taps[k]), shape_[k]));
  }

  std::size_t dim() const { return shape_.size(); }
  const AxisConv& axis(std::size_t k) const { return *axes_[k]; }

  /// Input box needed to produce `out_box`, per-axis tile/halo closure.
  Box required_input_box(const Box& out_box) const {
    Box in = out_box;
    for (std::size_t k = 0; k < dim(); ++k) {
      auto [lo, hi] = axes_[k]->required_input(out_box.lo[k], out_box.hi[k]);
      in.lo[k] = lo;
      in.hi[k] = hi;
    }
    return in;
  }

  /// Convolve values over `in_box` (which must cover required_input_box of
  /// `out_box`) into `out` over `out_box`. Both arrays are row-major within
  /// their boxes, last axis fastest.
  void run(const double* in, const Box& in_box, double* out, const Box& out_box) const {
    const std::size_t d = dim();
    if (in_box.dim() != d || out_box.dim() != d)
      throw err::invalid_argument("box dimension mismatch");
    for (std::size_t k = 0; k < d; ++k) {
      auto [lo, hi] = axes_[k]->required_input(out_box.lo[k], out_box.hi[k]);
      if (in_box.lo[k] > lo || in_box.hi[k] < hi)
        throw err::invalid_argument("input box does not cover the required closure");
    }

    // Stage k convolves axis k, shrinking that axis from its input closure to
    // the requested output range; axes before k are already at output ranges,
    // axes after k still at closure ranges.
    Box cur = in_box;
    std::vector<double> buf_a(in, in + box_size(in_box));
    std::vector<double> buf_b;
    for (std::size_t k = 0; k < d; ++k) {
      Box next = cur;
      next.lo[k] = out_box.lo[k];
      next.hi[k] = out_box.hi[k];
      buf_b.assign(static_cast<std::size_t>(box_size(next)), 0.0);
      convolve_axis(k, buf_a.data(), cur, buf_b.data(), next);
      buf_a.swap(buf_b);
      cur = next;
    }
    std::copy(buf_a.begin(), buf_a.end(), out);
  }

 private:
  static Index box_size(const Box& b) {
    Index n = 1;
    for (std::size_t k = 0; k < b.dim(); ++k) n *= (b.hi[k] - b.lo[k]);
    return n;
  }

  void convolve_axis(std::size_t k, const double* in, const Box& in_box, double* out,
                     const Box& out_box) const {
    const std::size_t d = dim();
    const AxisConv& conv = *axes_[k];

    std::vector<Index> in_ext(d), out_ext(d);
    for (std::size_t j = 0; j < d; ++j) {
      in_ext[j] = in_box.hi[j] - in_box.lo[j];
      out_ext[j] = out_box.hi[j] - out_box.lo[j];
    }
    std::vector<Index> in_str = detail::strides_of(in_ext);
    std::vector<Index> out_str = detail::strides_of(out_ext);

    // Lines run along axis k; enumerate the cross-section in the output box
    // (identical to the input box on every other axis).
    Index n_lines = 1;
    for (std::size_t j = 0; j < d; ++j)
      if (j != k) n_lines *= out_ext[j];

    const Index in_len = in_ext[k];
    const Index out_len = out_ext[k];
    parallel_for(static_cast<std::size_t>(n_lines), 256, [&](std::size_t begin, std::size_t end) {
      detail::FftScratch scratch;
      conv.ensure_scratch(scratch);
      scratch.line_in.resize(static_cast<std::size_t>(in_len));
      scratch.line_out.resize(static_cast<std::size_t>(out_len));
      std::vector<Index> idx(d, 0);
      for (std::size_t line = begin; line < end; ++line) {
        // Decode the cross-section index (row-major over axes != k).
        Index rem = static_cast<Index>(line);
        for (std::size_t j = d; j-- > 0;) {
          if (j == k) continue;
          idx[j] = rem % out_ext[j];
          rem /= out_ext[j];
        }
        Index in_base = 0, out_base = 0;
        for (std::size_t j = 0; j < d; ++j) {
          if (j == k) continue;
          in_base += (idx[j] + out_box.lo[j] - in_box.lo[j]) * in_str[j];
          out_base += idx[j] * out_str[j];
        }
        const double* src = in + in_base;
        for (Index p = 0; p < in_len; ++p)
          scratch.line_in[static_cast<std::size_t>(p)] = src[p * in_str[k]];
        conv.run_line(scratch.line_in.data(), in_box.lo[k], in_box.hi[k],
                      scratch.line_out.data(), out_box.lo[k], out_box.hi[k], scratch);
        double* dst = out + out_base;
        for (Index p = 0; p < out_len; ++p)
          dst[p * out_str[k]] = scratch.line_out[static_cast<std::size_t>(p)];
      }
    });
  }

  std::vector<Index> shape_;
  std::vector<std::unique_ptr<AxisConv>> axes_;
};

}  // namespace dfpca
