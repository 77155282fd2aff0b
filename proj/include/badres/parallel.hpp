#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace badres::detail {

inline std::size_t thread_count() {
    static const std::size_t n = [] {
        if (const char* env = std::getenv("BADRES_THREADS")) {
            const long v = std::atol(env);
            if (v >= 1) return std::min<std::size_t>(static_cast<std::size_t>(v), 64);
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return std::min<std::size_t>(hw ? hw : 1, 16);
    }();
    return n;
}

inline int& parallel_depth() {
    thread_local int depth = 0;
    return depth;
}

// Splits [0, n) into contiguous chunks, one per worker. Each index is
// processed by exactly one worker, so disjoint writes stay deterministic
// regardless of the thread count. Nested calls run inline.
inline void parallel_for(std::size_t n, std::size_t grain,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
    const std::size_t max_threads = parallel_depth() > 0 ? 1 : thread_count();
    std::size_t workers = std::min(max_threads, grain ? std::max<std::size_t>(n / grain, 1) : 1);
    if (workers <= 1 || n == 0) {
        if (n) fn(0, n);
        return;
    }
    workers = std::min(workers, n);
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    std::exception_ptr err;
    std::mutex err_mutex;
    auto run = [&](std::size_t begin, std::size_t end) {
        parallel_depth()++;
        try {
            fn(begin, end);
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (!err) err = std::current_exception();
        }
        parallel_depth()--;
    };
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back(run, begin, end);
    }
    run(0, std::min(chunk, n));
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace badres::detail
