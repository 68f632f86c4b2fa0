#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dfpca/dataset.hpp"

namespace dfpca {

/// One-dimensional Epanechnikov kernel on [-1, 1]: 0.75 * (1 - u^2).
inline double epanechnikov(double u) {
  const double t = 1.0 - u * u;
  return t > 0.0 ? 0.75 * t : 0.0;
}

/**
 * @brief Product Epanechnikov kernel with per-axis bandwidth scaling.
 *
 * Evaluates K_h(u) = prod_k (1/h_k) * 0.75 * (1 - (u_k/h_k)^2) on the support
 * |u_k| <= h_k, and 0 outside. `u` points at `dim` offsets (target - point).
 */
inline double kernel_eval(const double* u, const double* h, std::size_t dim) {
  double k = 1.0;
  for (std::size_t a = 0; a < dim; ++a) {
    const double z = u[a] / h[a];
    const double t = 1.0 - z * z;
    if (!(t > 0.0)) return 0.0;
    k *= 0.75 * t / h[a];
  }
  return k;
}

inline double kernel_eval(const std::vector<double>& u, const Bandwidth& bw) {
  return kernel_eval(u.data(), bw.h.data(), u.size());
}

/// Scaled one-axis factor (1/h) * 0.75 * (1 - (u/h)^2), zero outside support.
inline double kernel_axis(double u, double h) {
  const double z = u / h;
  const double t = 1.0 - z * z;
  return t > 0.0 ? 0.75 * t / h : 0.0;
}

}  // namespace dfpca
