#pragma once

#include <cstdint>
#include <functional>

namespace uxnet {

/// Worker count: UXNET_THREADS if set, else hardware concurrency.
int thread_count();
void set_thread_count(int n);

/// Deterministic mode: parallel loops keep a fixed, thread-count independent
/// partition and every reduction is summed in a fixed order.
bool deterministic();
void set_deterministic(bool on);

/// Runs fn(begin, end) over [0, n) in contiguous chunks of at least `grain`.
/// Chunks write disjoint outputs; the partition depends only on n and grain.
void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace uxnet
