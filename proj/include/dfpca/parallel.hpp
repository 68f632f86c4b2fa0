#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace dfpca {

namespace detail {
inline int& max_threads_ref() {
  static int value = 1;
  return value;
}
}  // namespace detail

/// Caps worker threads used by parallel_for (the CLI --threads flag lands
/// here). Values < 1 select single-threaded execution.
inline void set_max_threads(int n) { detail::max_threads_ref() = std::max(1, n); }
inline int max_threads() { return detail::max_threads_ref(); }

/**
 * @brief Runs fn(begin, end) over [0, n) split into fixed-size chunks.
 *
 * Chunk boundaries depend only on n and chunk (never on the thread count), and
 * every chunk writes disjoint state, so results are identical for any
 * --threads setting. Reductions that care about floating-point order must
 * combine per-chunk partials sequentially in chunk order themselves.
 */
inline void parallel_for(std::size_t n, std::size_t chunk,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  chunk = std::max<std::size_t>(1, chunk);
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  const int workers =
      static_cast<int>(std::min<std::size_t>(n_chunks, static_cast<std::size_t>(max_threads())));

  if (workers <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c)
      fn(c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t c = next.fetch_add(1);
        if (c >= n_chunks) return;
        try {
          fn(c * chunk, std::min(n, (c + 1) * chunk));
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace dfpca
