#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace aomisreg {

inline unsigned default_workers() {
    const unsigned n = std::thread::hardware_concurrency();
    return n ? n : 1;
}

namespace detail {
inline bool& inside_pool() {
    thread_local bool flag = false;
    return flag;
}
}  // namespace detail

// Runs fn(i) for i in [0, n) on a pool of workers pulling indices from a shared
// counter. Results must be written by index so the outcome is independent of
// scheduling. The first exception is rethrown after all workers join.
// Nested calls run serially on the calling worker.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, unsigned workers = 0) {
    if (!workers) workers = default_workers();
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    if (workers <= 1 || detail::inside_pool()) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mutex;
    auto body = [&] {
        detail::inside_pool() = true;
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(err_mutex);
                if (!err) err = std::current_exception();
                next = n;
            }
        }
        detail::inside_pool() = false;
    };
    std::vector<std::thread> pool;
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(body);
    body();
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace aomisreg
