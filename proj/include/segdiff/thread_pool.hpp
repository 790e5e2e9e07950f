#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace segdiff {

inline int env_thread_default() {
  if (const char* e = std::getenv("SEGDIFF_THREADS")) {
    const int v = std::atoi(e);
    if (v >= 1) return v;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> count{env_thread_default()};
  return count;
}

inline int thread_count() { return thread_count_slot().load(); }
inline void set_thread_count(int n) { thread_count_slot().store(std::max(1, n)); }

/// Runs fn(begin, end) over a static partition of [0, n). Each index is
/// processed by exactly one worker, so any computation whose outputs are
/// disjoint per index gives bit-identical results for every thread count.
template <class Fn>
void parallel_for(int n, Fn&& fn, int max_threads = 0) {
  if (n <= 0) return;
  int workers = max_threads > 0 ? max_threads : thread_count();
  workers = std::min(workers, n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers) - 1);
  const int chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    const int begin = w * chunk;
    const int end = std::min(n, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  fn(0, std::min(n, chunk));
  for (auto& t : threads) t.join();
}

}  // namespace segdiff
