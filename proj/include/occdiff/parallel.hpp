#pragma once

// Static-partition parallel loop. Results are written per index, so callers
// reduce in index order and get the same answer for any worker count.

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace occdiff {

/// Sets flush-to-zero and denormals-are-zero for the current thread while in
/// scope.
class FlushDenormals {
 public:
  FlushDenormals() {
#if defined(__SSE__)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040u);
#endif
  }
  ~FlushDenormals() {
#if defined(__SSE__)
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_ = 0;
};

namespace detail {
inline bool flushing() {
#if defined(__SSE__)
  return (_mm_getcsr() & 0x8040u) == 0x8040u;
#else
  return false;
#endif
}
}  // namespace detail

/// Worker threads inherit the caller's denormal mode.
template <class F>
void parallel_for(std::size_t n, int workers, F&& fn) {
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (std::size_t id = 0; id < w; ++id) {
    pool.emplace_back([&, id, ftz = detail::flushing()] {
      std::optional<FlushDenormals> guard;
      if (ftz) guard.emplace();
      try {
        for (std::size_t i = id; i < n; i += w) fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace occdiff
