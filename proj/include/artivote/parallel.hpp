#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace artivote {

/// Worker count: ARTIVOTE_THREADS if set, else hardware concurrency.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("ARTIVOTE_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(shard) for shard in [0, shards) on up to worker_count() threads.
/// Shards are independent; callers merge per-shard results in shard order.
template <typename Fn>
void parallel_shards(std::size_t shards, Fn&& fn, std::size_t workers = worker_count()) {
  workers = std::min(workers, shards);
  if (workers <= 1) {
    for (std::size_t s = 0; s < shards; ++s) fn(s);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t s = w; s < shards; s += workers) fn(s);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// [begin, end) range of shard `s` when splitting n items into `shards`.
inline std::pair<std::size_t, std::size_t> shard_range(std::size_t n, std::size_t shards, std::size_t s) {
  const std::size_t base = n / shards;
  const std::size_t rem = n % shards;
  const std::size_t begin = s * base + std::min(s, rem);
  return {begin, begin + base + (s < rem ? 1 : 0)};
}

}  // namespace artivote
