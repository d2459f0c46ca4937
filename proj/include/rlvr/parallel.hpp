#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace rlvr {

// Runs fn(start, end) over contiguous index blocks on up to
// hardware_concurrency threads. Each index is processed exactly once and
// callers write results by index, so outcomes are deterministic regardless of
// scheduling.
inline void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
    if (n == 0) return;
    size_t threads = std::thread::hardware_concurrency();
    if (threads == 0) threads = 1;
    if (threads > n) threads = n;
    if (threads <= 1) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    const size_t chunk = (n + threads - 1) / threads;
    for (size_t t = 0; t < threads; ++t) {
        const size_t start = t * chunk;
        const size_t end = std::min(n, start + chunk);
        if (start >= end) break;
        pool.emplace_back([&fn, start, end] { fn(start, end); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace rlvr
