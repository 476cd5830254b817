#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "s3c/types.hpp"

namespace s3c {

/// Worker count: S3C_THREADS if set, otherwise the hardware concurrency.
inline unsigned worker_count() {
    if (const char* env = std::getenv("S3C_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            return static_cast<unsigned>(n);
        }
    }
    return std::max(1U, std::thread::hardware_concurrency());
}

/// Runs task(i) for i in [0, n_tasks). Tasks must write to disjoint outputs; the
/// first exception thrown by any task is rethrown on the calling thread.
template <typename Task>
void parallel_for(Index n_tasks, Task&& task) {
    const unsigned workers =
        static_cast<unsigned>(std::min<Index>(static_cast<Index>(worker_count()), n_tasks));
    if (workers <= 1) {
        for (Index i = 0; i < n_tasks; ++i) {
            task(i);
        }
        return;
    }
    std::atomic<Index> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto run = [&] {
        for (Index i = next++; i < n_tasks; i = next++) {
            try {
                task(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) {
                    error = std::current_exception();
                }
                next = n_tasks;
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (unsigned w = 1; w < workers; ++w) {
        pool.emplace_back(run);
    }
    run();
    pool.clear();
    if (error) {
        std::rethrow_exception(error);
    }
}

}  // namespace s3c
