#include "kw/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kw {

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_thread_count(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

int configure_threads_from_env() {
  if (const char* env = std::getenv("KW_THREADS")) {
    try {
      int cap = std::stoi(env);
      if (cap > 0) set_thread_count(std::min(cap, thread_count()));
    } catch (const std::exception&) {
      // ignore malformed values
    }
  }
  return thread_count();
}

}  // namespace kw
