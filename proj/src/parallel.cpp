#include "taskroute/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace taskroute {

namespace {
std::atomic<int> g_threads{1};
}

void set_num_threads(int threads) { g_threads.store(std::max(1, threads)); }

int num_threads() { return g_threads.load(); }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk) {
  if (n == 0) return;
  const auto max_workers = std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk));
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), max_workers);
  if (workers <= 1) {
    body(0, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(0, std::min(n, chunk));
}

}  // namespace taskroute
