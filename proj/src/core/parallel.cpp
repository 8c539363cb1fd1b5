#include "cellmamba/core/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

#include "cellmamba/core/check.hpp"

namespace cm {
namespace {

thread_local bool t_in_worker = false;

// One orchestrating thread issues jobs; workers plus the caller drain a shared
// chunk counter. Output ranges are disjoint, so results do not depend on which
// thread takes which chunk.
class Pool {
 public:
  static Pool& instance() {
    static Pool pool;
    return pool;
  }

  void resize(int n) {
    n = std::max(1, n);
    if (n == threads_) return;
    shutdown();
    threads_ = n;
    spawn();
  }

  int threads() const { return threads_; }

  void run(std::int64_t n, std::int64_t grain,
           const std::function<void(std::int64_t, std::int64_t)>& body) {
    grain = std::max<std::int64_t>(1, grain);
    if (threads_ == 1 || t_in_worker || n <= grain) {
      body(0, n);
      return;
    }
    std::int64_t chunks = std::min<std::int64_t>(threads_ * 4, (n + grain - 1) / grain);
    std::int64_t chunk = (n + chunks - 1) / chunks;
    std::int64_t actual_chunks = (n + chunk - 1) / chunk;

    {
      std::lock_guard<std::mutex> lock(mutex_);
      job_body_ = &body;
      job_n_ = n;
      job_chunk_ = chunk;
      next_chunk_.store(0, std::memory_order_relaxed);
      pending_.store(static_cast<int>(actual_chunks), std::memory_order_relaxed);
      ++epoch_;
    }
    cv_.notify_all();

    drain(&body, n, chunk);

    std::unique_lock<std::mutex> lock(mutex_);
    done_cv_.wait(lock, [&] { return pending_.load(std::memory_order_acquire) == 0; });
    job_body_ = nullptr;
  }

 private:
  Pool() { spawn(); }
  ~Pool() { shutdown(); }

  void spawn() {
    stop_ = false;
    for (int i = 0; i < threads_ - 1; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void shutdown() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stop_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void worker_loop() {
    t_in_worker = true;
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::int64_t, std::int64_t)>* body = nullptr;
      std::int64_t n = 0;
      std::int64_t chunk = 1;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait(lock, [&] { return stop_ || epoch_ != seen; });
        seen = epoch_;
        if (stop_) return;
        body = job_body_;
        n = job_n_;
        chunk = job_chunk_;
      }
      if (body != nullptr) drain(body, n, chunk);
    }
  }

  void drain(const std::function<void(std::int64_t, std::int64_t)>* body,
             std::int64_t n, std::int64_t chunk) {
    for (;;) {
      std::int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      std::int64_t begin = c * chunk;
      if (begin >= n) break;
      std::int64_t end = std::min(n, begin + chunk);
      (*body)(begin, end);
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> lock(mutex_);
        done_cv_.notify_one();
      }
    }
  }

  int threads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  bool stop_ = false;
  std::uint64_t epoch_ = 0;
  const std::function<void(std::int64_t, std::int64_t)>* job_body_ = nullptr;
  std::int64_t job_n_ = 0;
  std::int64_t job_chunk_ = 1;
  std::atomic<std::int64_t> next_chunk_{0};
  std::atomic<int> pending_{0};
};

}  // namespace

void set_num_threads(int n) {
  CM_CHECK(n >= 0, "set_num_threads: need n >= 0 (0 = hardware default), got ", n);
  if (n == 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  Pool::instance().resize(n);
}

int num_threads() { return Pool::instance().threads(); }

void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (n <= 0) return;
  Pool::instance().run(n, grain, body);
}

}  // namespace cm
