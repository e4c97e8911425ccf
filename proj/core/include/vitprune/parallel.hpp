#pragma once

#include <cstddef>
#include <functional>

namespace vitprune {

/// Worker count: NUWA_THREADS if set and positive, else hardware concurrency.
int worker_count();

/// Runs fn(i) for i in [0, n) across up to worker_count() threads. Work is
/// split into contiguous chunks; callers that reduce results must do so in
/// index order afterwards to stay independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace vitprune
