#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace saessd {

// Default worker count: cores - 1, at least one.
inline std::size_t default_jobs() {
    auto hw = std::thread::hardware_concurrency();
    return hw > 1 ? hw - 1 : 1;
}

// Runs body(i) for i in [0, count) on up to `jobs` threads. Each index is run
// exactly once; callers write results into slot i so the outcome does not
// depend on scheduling. The first exception (lowest index) is rethrown after
// all workers finish.
template <class Body>
void parallel_for(std::size_t count, std::size_t jobs, Body&& body) {
    jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(count, 1));
    if (jobs == 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr error;
    std::size_t error_index = count;
    auto worker = [&] {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (i < error_index) {
                    error_index = i;
                    error = std::current_exception();
                }
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        pool.reserve(jobs);
        for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);
}

}  // namespace saessd
