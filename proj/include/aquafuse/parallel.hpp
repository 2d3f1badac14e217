#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace aquafuse {

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

/// Caps the number of workers used by parallel_for. Values below 1 are treated as 1.
inline void set_num_threads(int n) { detail::thread_setting().store(std::max(1, n)); }
inline int num_threads() { return detail::thread_setting().load(); }

/// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each.
///
/// Callers must make every output element depend on exactly one index so
/// that results do not depend on the chunking. `min_chunk` keeps tiny loops
/// serial.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t min_chunk = 1) {
  if (n == 0) return;
  const std::size_t workers = std::min<std::size_t>(
      static_cast<std::size_t>(num_threads()), std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk)));
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace aquafuse
