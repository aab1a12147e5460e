#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <span>
#include <thread>
#include <vector>

namespace setar {

/// Worker cap from SETAR_THREADS, defaulting to the hardware thread count.
std::size_t worker_count();

/// Calls fn(i) for i in [0, n) across worker threads. If any call throws, the
/// exception from the lowest failing index is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Pairwise (tree) summation; the result does not depend on thread count.
double pairwise_sum(std::span<const double> values);

}  // namespace setar
