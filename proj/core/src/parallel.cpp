#include "cliplab/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "cliplab/errors.hpp"

namespace cliplab {

namespace {
std::atomic<int> g_threads{1};
}

int default_threads() noexcept { return g_threads.load(); }

void set_default_threads(int threads) {
  if (threads < 1) throw OutOfRangeError("thread count must be at least 1");
  g_threads.store(threads);
}

void parallel_blocks(int n_blocks, const std::function<void(int)>& fn, int threads) {
  if (threads <= 0) threads = default_threads();
  threads = std::min(threads, n_blocks);
  if (threads <= 1) {
    for (int b = 0; b < n_blocks; ++b) fn(b);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w) {
    workers.emplace_back([&] {
      for (int b = next++; b < n_blocks; b = next++) {
        try {
          fn(b);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n_blocks;
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace cliplab
