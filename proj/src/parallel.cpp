#include "lqec/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace lqec {

int worker_count() {
    static const int count = [] {
        if (const char* env = std::getenv("LQEC_THREADS")) {
            const int n = std::atoi(env);
            if (n >= 1) return std::min(n, 64);
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return static_cast<int>(std::clamp(hw, 1u, 8u));
    }();
    return count;
}

void parallel_chunks(size_t n_chunks, const std::function<void(size_t)>& fn) {
    const size_t workers = std::min<size_t>(worker_count(), n_chunks);
    if (workers <= 1) {
        for (size_t i = 0; i < n_chunks; ++i) fn(i);
        return;
    }

    std::atomic<size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    size_t first_error_chunk = n_chunks;

    auto body = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= n_chunks) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (i < first_error_chunk) {
                    first_error_chunk = i;
                    first_error = std::current_exception();
                }
            }
        }
    };

    std::vector<std::thread> threads;
    threads.reserve(workers - 1);
    for (size_t w = 1; w < workers; ++w) threads.emplace_back(body);
    body();
    for (auto& t : threads) t.join();

    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace lqec
