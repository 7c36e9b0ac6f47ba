// parallel.hpp - deterministic fork/join helper. Work items are independent;
// any cross-item accumulation happens after the join, in item order, so the
// result is identical for every thread count.
#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace morphmark {

// explicit request > MORPHMARK_THREADS > 1
inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("MORPHMARK_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 1;
}

inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::string> errors(static_cast<std::size_t>(threads));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
            } catch (const std::exception& ex) {
                errors[static_cast<std::size_t>(t)] = ex.what();
                failed.store(true);
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failed.load()) {
        for (const auto& e : errors)
            if (!e.empty()) throw std::runtime_error(e);
    }
}

}  // namespace morphmark
