#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dhn {

/// Number of worker threads to use for a request of `threads`
/// (0 = library default).
inline int resolve_threads(int threads) {
#ifdef _OPENMP
  if (threads <= 0) return omp_get_max_threads();
  return threads;
#else
  (void)threads;
  return 1;
#endif
}

/// Parallel loop over independent iterations. Results must be written to
/// per-index slots; no cross-iteration state.
template <typename Fn>
void parallel_for(std::int64_t n, int threads, Fn&& fn) {
  const int t = resolve_threads(threads);
#ifdef _OPENMP
  if (t > 1) {
#pragma omp parallel for schedule(static) num_threads(t)
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#endif
  (void)t;
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

/// Fixed number of index chunks used for reduction loops. The chunk
/// decomposition depends only on n, never on the thread count, so a
/// chunk-ordered reduction gives the same floating-point sum for any
/// number of workers.
inline constexpr int kReductionChunks = 32;

struct ChunkRange {
  std::int64_t begin = 0;
  std::int64_t end = 0;
};

inline int chunk_count(std::int64_t n) {
  return static_cast<int>(std::min<std::int64_t>(n, kReductionChunks));
}

inline ChunkRange chunk_range(std::int64_t n, int nchunks, int chunk) {
  const std::int64_t lo = n * chunk / nchunks;
  const std::int64_t hi = n * (chunk + 1) / nchunks;
  return {lo, hi};
}

/// Runs fn(chunk, begin, end) over the fixed chunk decomposition of [0, n),
/// in parallel when threads > 1. Within a chunk the caller iterates
/// sequentially; across chunks the caller reduces in chunk order afterwards.
template <typename Fn>
void parallel_chunks(std::int64_t n, int threads, Fn&& fn) {
  if (n <= 0) return;
  const int nchunks = chunk_count(n);
  const int t = resolve_threads(threads);
#ifdef _OPENMP
  if (t > 1) {
#pragma omp parallel for schedule(dynamic, 1) num_threads(t)
    for (int c = 0; c < nchunks; ++c) {
      const ChunkRange r = chunk_range(n, nchunks, c);
      fn(c, r.begin, r.end);
    }
    return;
  }
#endif
  (void)t;
  for (int c = 0; c < nchunks; ++c) {
    const ChunkRange r = chunk_range(n, nchunks, c);
    fn(c, r.begin, r.end);
  }
}

}  // namespace dhn
