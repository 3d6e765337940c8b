#include "ebnet/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace ebnet {
namespace {

int default_threads() {
  if (const char* env = std::getenv("EBNET_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{default_threads()};
  return cap;
}

}  // namespace

int max_threads() { return thread_cap().load(); }

void set_max_threads(int n) { thread_cap().store(std::max(1, n)); }

void parallel_for(Index begin, Index end, const std::function<void(Index, Index)>& fn) {
  const Index total = end - begin;
  if (total <= 0) return;
  const Index workers = std::min<Index>(max_threads(), total);
  if (workers <= 1) {
    fn(begin, end);
    return;
  }
  const Index chunk = (total + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  for (Index w = 1; w < workers; ++w) {
    const Index lo = begin + w * chunk;
    const Index hi = std::min(end, lo + chunk);
    if (lo < hi) pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(begin, std::min(end, begin + chunk));
}

}  // namespace ebnet
