#include "sardiff/threading.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace sardiff {

namespace {

thread_local bool in_parallel_region = false;

// Fixed pool of (workers - 1) threads; the calling thread joins the work
// loop, so `run` uses all configured workers.
class Pool {
 public:
  explicit Pool(int helper_threads) {
    for (int i = 0; i < helper_threads; ++i)
      threads_.emplace_back([this] { helper_loop(); });
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(int tasks, const std::function<void(int)>& fn) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      task_ = &fn;
      next_ = 0;
      total_ = tasks;
      pending_ = tasks;
    }
    cv_.notify_all();
    work_until_done();
  }

 private:
  void work_until_done() {
    std::unique_lock<std::mutex> lock(mu_);
    drain(lock);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    task_ = nullptr;
  }

  void helper_loop() {
    std::unique_lock<std::mutex> lock(mu_);
    for (;;) {
      cv_.wait(lock, [this] { return stop_ || (task_ && next_ < total_); });
      if (stop_) return;
      drain(lock);
    }
  }

  void drain(std::unique_lock<std::mutex>& lock) {
    while (task_ && next_ < total_) {
      const int idx = next_++;
      const auto* fn = task_;
      lock.unlock();
      in_parallel_region = true;
      (*fn)(idx);
      in_parallel_region = false;
      lock.lock();
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int)>* task_ = nullptr;
  int next_ = 0, total_ = 0, pending_ = 0;
  bool stop_ = false;
};

int configured_threads() {
  if (const char* env = std::getenv("SARDIFF_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

Pool* pool() {
  static Pool instance(std::max(0, configured_threads() - 1));
  return &instance;
}

}  // namespace

int num_threads() {
  static int n = configured_threads();
  return n;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  const int workers = num_threads();
  // Nested calls run inline; the pool handles one region at a time.
  if (workers <= 1 || n == 1 || in_parallel_region) {
    fn(0, n);
    return;
  }
  const int chunks = static_cast<int>(std::min<std::int64_t>(n, workers));
  const std::int64_t per = (n + chunks - 1) / chunks;
  std::function<void(int)> task = [&](int c) {
    const std::int64_t b = c * per;
    const std::int64_t e = std::min<std::int64_t>(n, b + per);
    if (b < e) fn(b, e);
  };
  pool()->run(chunks, task);
}

}  // namespace sardiff
