#pragma once

#include <cstddef>
#include <functional>

namespace taskroute {

/// Number of worker threads used inside kernels. Defaults to 1.
void set_num_threads(int threads);
int num_threads();

/// Splits [0, n) into contiguous chunks, one per thread. Every index is
/// processed by exactly one call, so results never depend on the thread count
/// as long as `body` writes only to index-owned outputs.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk = 1);

}  // namespace taskroute
