#pragma once

#include <cstddef>
#include <exception>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace htr {

/// Caps the worker count used by parallel_for. Values < 1 leave the runtime default.
inline void set_thread_count(int threads) {
#ifdef _OPENMP
  if (threads >= 1) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

inline int thread_index() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

/// Runs body(i) for i in [0, n). Iterations must write disjoint state; any reduction is done
/// afterwards by the caller in index order so results do not depend on the thread count.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
#ifdef _OPENMP
  if (n > 1 && omp_get_max_threads() > 1) {
    // Exceptions cannot cross the OpenMP region; the lowest-index failure is rethrown.
    std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
      try {
        body(static_cast<std::size_t>(i));
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) body(i);
}

}  // namespace htr
