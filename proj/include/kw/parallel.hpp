#pragma once

namespace kw {

// Worker count used by the OpenMP kernels (1 when built without OpenMP).
int thread_count();
void set_thread_count(int n);

// Applies KW_THREADS (if set and positive) as an upper bound on the worker
// count. Returns the resulting count.
int configure_threads_from_env();

}  // namespace kw
