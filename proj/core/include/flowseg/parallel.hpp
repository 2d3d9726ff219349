#pragma once

#include <cstdint>
#include <functional>

namespace flowseg {

/// Worker count from FLOWSEG_THREADS, else the hardware concurrency.
int worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Work items
/// must be independent; the first exception thrown is rethrown.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace flowseg
