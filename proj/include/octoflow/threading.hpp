#pragma once

#include <cstdint>
#include <functional>

namespace octoflow {

// Minimal persistent worker pool. parallel_for splits [0, n) into one
// contiguous chunk per worker; chunk boundaries depend only on n and the pool
// size, never on scheduling, so numeric results are reproducible for a fixed
// thread count. Nested calls from inside a worker run inline.
class ThreadPool {
 public:
  static ThreadPool& instance();

  // Total worker count including the calling thread. n == 1 disables
  // parallelism entirely (deterministic mode).
  void resize(std::size_t n_threads);
  std::size_t size() const;

  void parallel_for(std::int64_t n,
                    const std::function<void(std::int64_t, std::int64_t)>& body);

  ~ThreadPool();

 private:
  ThreadPool();
  struct Impl;
  Impl* impl_;
};

}  // namespace octoflow
