#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dfpca {

namespace detail {

/// splitmix64 finalizer; used both to whiten seeds and to derive substreams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/**
 * @brief Deterministic random stream with explicit normal sampling.
 *
 * std::normal_distribution is implementation-defined, so normal draws use a
 * fixed Box-Muller transform over mt19937_64. Given the same seed the stream
 * is bit-reproducible across platforms and standard libraries. Substreams
 * (per sample, per replicate) are derived by splitmix64 mixing so work can be
 * partitioned without changing any draw.
 */
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed)
      : engine_(detail::splitmix64(seed)) {}

  /// Independent stream for a numbered subtask of this seed.
  static RandomStream substream(std::uint64_t seed, std::uint64_t index) {
    return RandomStream(detail::splitmix64(seed) ^
                        detail::splitmix64(index + 0x51ed2701a9e5a3d5ULL));
  }

  /// Uniform on (0, 1): 53-bit mantissa, never exactly 0.
  double uniform() {
    const std::uint64_t bits = engine_() >> 11;  // top 53 bits
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; the paired draw is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;  // 2*pi*u2
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Multiply-shift rejection-free mapping is biased by < 2^-53 for the
    // n values used here (subsampling); acceptable and deterministic.
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) %
           (n == 0 ? 1 : n);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace dfpca
