#pragma once

// Deterministic replicate runner: results are stored by replicate index, so the
// output does not depend on the number of threads or on scheduling.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace willow {

/// requested > 0 wins; otherwise WILLOW_THREADS, otherwise the available cores.
inline int thread_count(int requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("WILLOW_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Evaluates fn(i) for i in [0, n); the exception of the lowest failing index is rethrown.
template <class T, class Fn>
std::vector<T> parallel_map(long n, int threads, Fn&& fn) {
  std::vector<T> out(static_cast<std::size_t>(n));
  threads = std::max(1, std::min<int>(threads, static_cast<int>(std::max(1L, n))));
  if (threads == 1) {
    for (long i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fn(i);
    return out;
  }
  std::atomic<long> next{0};
  std::mutex guard;
  long failed_at = n;
  std::exception_ptr failure;
  auto worker = [&] {
    for (long i = next++; i < n; i = next++) {
      try {
        out[static_cast<std::size_t>(i)] = fn(i);
      } catch (...) {
        std::lock_guard lock(guard);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (int k = 0; k < threads; ++k) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace willow
