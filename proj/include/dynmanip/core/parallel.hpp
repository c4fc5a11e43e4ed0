#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dynmanip {

/// Runs fn(i) for i in [0, n) on up to `jobs` worker threads and returns the
/// results in index order. Each task must own its state; the output is
/// independent of `jobs`.
template <typename Fn>
auto parallel_map(std::size_t n, unsigned jobs, Fn&& fn) {
  using Result = decltype(fn(std::size_t{0}));
  // One slot per task; a bare std::vector<bool> would pack neighbouring
  // results into shared words.
  struct Slot {
    Result value{};
  };
  std::vector<Slot> slots(n);
  auto collect = [&] {
    std::vector<Result> out;
    out.reserve(n);
    for (auto& s : slots) out.push_back(std::move(s.value));
    return out;
  };
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) slots[i].value = fn(i);
    return collect();
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        slots[i].value = fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(jobs);
  for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return collect();
}

}  // namespace dynmanip
