#pragma once

#include <Eigen/Core>

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace retina {

template <class S>
using VecX = Eigen::Array<S, Eigen::Dynamic, 1>;

// Row-major so a flattened raster matches image row order.
template <class S>
using Raster = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class... Args>
[[noreturn]] inline void fail(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  throw std::runtime_error(os.str());
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Deterministic RNG. Distribution algorithms are pinned here instead of using
// std::*_distribution, whose output is implementation-defined; the engine state
// round-trips through text so checkpoints can resume the exact stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  // Uniform in [0,1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) fail("Rng::below: n must be positive");
    std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= lim);
    return x % n;
  }

  // Box-Muller, one value per call; keeps all state inside the engine.
  double normal() {
    double u1 = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) fail("Rng::set_state: malformed engine state");
  }

 private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Deterministic task pool. Tasks write disjoint outputs; reductions are done
// by the caller in a fixed order, so results never depend on the thread count.

class ThreadPool {
 public:
  explicit ThreadPool(int workers) {
    for (int i = 0; i < workers; ++i)
      threads_.emplace_back([this] { worker(); });
  }

  ~ThreadPool() {
    {
      std::unique_lock lk(mu_);
      stop_ = true;
      cv_.notify_all();
    }
    for (auto& t : threads_) t.join();
  }

  // Runs fn(0..ntasks-1); blocks until all complete. Not re-entrant.
  void run(int ntasks, const std::function<void(int)>& fn) {
    std::unique_lock lk(mu_);
    fn_ = &fn;
    next_ = 0;
    total_ = ntasks;
    pending_ = ntasks;
    cv_.notify_all();
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    fn_ = nullptr;
  }

  int size() const { return static_cast<int>(threads_.size()); }

 private:
  void worker() {
    std::unique_lock lk(mu_);
    for (;;) {
      cv_.wait(lk, [this] { return stop_ || (fn_ && next_ < total_); });
      if (stop_) return;
      while (fn_ && next_ < total_) {
        int idx = next_++;
        auto* f = fn_;
        lk.unlock();
        (*f)(idx);
        lk.lock();
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int)>* fn_ = nullptr;
  int next_ = 0, total_ = 0, pending_ = 0;
  bool stop_ = false;
};

namespace detail {
inline int& thread_setting() {
  static int n = 1;
  return n;
}
inline std::unique_ptr<ThreadPool>& pool_slot() {
  static std::unique_ptr<ThreadPool> p;
  return p;
}
}  // namespace detail

inline void set_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (n == detail::thread_setting()) return;
  detail::thread_setting() = n;
  detail::pool_slot().reset(n > 1 ? new ThreadPool(n) : nullptr);
}

inline int get_threads() { return detail::thread_setting(); }

// Runs fn(task) for task in [0, ntasks). Inline when single-threaded.
inline void parallel_tasks(int ntasks, const std::function<void(int)>& fn) {
  auto& pool = detail::pool_slot();
  if (!pool || ntasks <= 1) {
    for (int i = 0; i < ntasks; ++i) fn(i);
    return;
  }
  pool->run(ntasks, fn);
}

// Splits [0, n) into chunks and runs fn(lo, hi) per chunk.
inline void parallel_range(Eigen::Index n, const std::function<void(Eigen::Index, Eigen::Index)>& fn) {
  int nt = get_threads();
  if (nt <= 1 || n < 2) {
    if (n > 0) fn(0, n);
    return;
  }
  Eigen::Index chunks = std::min<Eigen::Index>(n, nt * 4);
  Eigen::Index step = (n + chunks - 1) / chunks;
  parallel_tasks(static_cast<int>(chunks), [&](int c) {
    Eigen::Index lo = c * step;
    Eigen::Index hi = std::min(n, lo + step);
    if (lo < hi) fn(lo, hi);
  });
}

}  // namespace retina
