#include "octoflow/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace octoflow {

namespace {
thread_local bool tls_inside_worker = false;
}

struct ThreadPool::Impl {
  std::vector<std::thread> workers;
  std::mutex mu;
  std::condition_variable cv_work;
  std::condition_variable cv_done;
  const std::function<void(std::int64_t, std::int64_t)>* job = nullptr;
  std::int64_t job_n = 0;
  std::size_t job_chunks = 0;
  std::uint64_t generation = 0;
  std::size_t pending = 0;
  bool stopping = false;

  static std::pair<std::int64_t, std::int64_t> chunk(std::int64_t n, std::size_t nchunks,
                                                     std::size_t c) {
    std::int64_t b = static_cast<std::int64_t>(n * static_cast<__int128>(c) / nchunks);
    std::int64_t e = static_cast<std::int64_t>(n * static_cast<__int128>(c + 1) / nchunks);
    return {b, e};
  }

  void worker_loop(std::size_t worker_id) {
    tls_inside_worker = true;
    std::uint64_t seen = 0;
    for (;;) {
      std::unique_lock lk(mu);
      cv_work.wait(lk, [&] { return stopping || generation != seen; });
      if (stopping) return;
      seen = generation;
      auto* fn = job;
      auto [b, e] = chunk(job_n, job_chunks, worker_id);
      lk.unlock();
      if (b < e) (*fn)(b, e);
      lk.lock();
      if (--pending == 0) cv_done.notify_all();
    }
  }

  void stop() {
    {
      std::lock_guard lk(mu);
      stopping = true;
    }
    cv_work.notify_all();
    for (auto& t : workers) t.join();
    workers.clear();
    stopping = false;
  }
};

ThreadPool::ThreadPool() : impl_(new Impl) {}

ThreadPool::~ThreadPool() {
  impl_->stop();
  delete impl_;
}

ThreadPool& ThreadPool::instance() {
  static ThreadPool pool;
  return pool;
}

void ThreadPool::resize(std::size_t n_threads) {
  if (n_threads == 0) n_threads = 1;
  if (n_threads == impl_->workers.size() + 1) return;
  impl_->stop();
  for (std::size_t i = 1; i < n_threads; ++i)
    impl_->workers.emplace_back([this, i] { impl_->worker_loop(i); });
}

std::size_t ThreadPool::size() const { return impl_->workers.size() + 1; }

void ThreadPool::parallel_for(std::int64_t n,
                              const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (n <= 0) return;
  std::size_t nchunks = size();
  if (nchunks == 1 || tls_inside_worker || n < 2) {
    body(0, n);
    return;
  }
  {
    std::lock_guard lk(impl_->mu);
    impl_->job = &body;
    impl_->job_n = n;
    impl_->job_chunks = nchunks;
    impl_->pending = nchunks - 1;
    ++impl_->generation;
  }
  impl_->cv_work.notify_all();
  auto [b, e] = Impl::chunk(n, nchunks, 0);
  if (b < e) body(b, e);
  std::unique_lock lk(impl_->mu);
  impl_->cv_done.wait(lk, [&] { return impl_->pending == 0; });
}

}  // namespace octoflow
