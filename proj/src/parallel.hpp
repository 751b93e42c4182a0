#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace ssr3d::detail {

/// Worker cap: SSR3D_THREADS if set and positive, else hardware concurrency.
inline std::size_t worker_limit() {
  static const std::size_t limit = [] {
    std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SSR3D_THREADS")) {
      try {
        long v = std::stol(env);
        if (v > 0) return std::min<std::size_t>(hw, static_cast<std::size_t>(v));
      } catch (...) {
      }
    }
    return hw;
  }();
  return limit;
}

/// Runs fn(i) for i in [0, count). Each index must own its outputs, so the
/// result does not depend on the worker count.
template <class Fn>
void parallel_for(std::size_t count, std::size_t work_per_item, Fn&& fn) {
  constexpr std::size_t kMinWorkPerThread = std::size_t{1} << 18;
  std::size_t threads = std::min(worker_limit(), count);
  if (threads > 1) threads = std::min(threads, std::max<std::size_t>(1, count * work_per_item / kMinWorkPerThread));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < count; i += threads) fn(i);
    });
  }
}

}  // namespace ssr3d::detail
