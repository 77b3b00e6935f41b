#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace capsl {

namespace detail {
inline std::size_t& thread_setting() {
  static std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  return n;
}
}  // namespace detail

inline std::size_t thread_count() { return detail::thread_setting(); }
inline void set_thread_count(std::size_t n) { detail::thread_setting() = std::max<std::size_t>(1, n); }

// Runs fn(i) for i in [0, n). Every index is independent, so results never
// depend on the worker count; callers that reduce must do so afterwards in a
// fixed order.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace capsl
