#pragma once

// Minimal fork-join parallel_for. Work items write to caller-owned slots
// indexed by i, so scheduling order never affects results; any reduction
// happens afterwards in index order.

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace physar {

inline int default_jobs() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Global cap, set once from the CLI --jobs flag.
inline int& job_cap() {
    static int cap = default_jobs();
    return cap;
}

template <class Fn>
void parallel_for(int64_t n, Fn&& fn, int jobs = 0) {
    if (jobs <= 0) jobs = job_cap();
    jobs = static_cast<int>(std::min<int64_t>(jobs, n));
    if (n <= 0) return;
    if (jobs <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr err;
    std::atomic<bool> failed{false};
    auto worker = [&]() {
        for (;;) {
            const int64_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                fn(i);
            } catch (...) {
                if (!failed.exchange(true)) err = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(jobs) - 1);
    for (int t = 1; t < jobs; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    if (failed.load() && err) std::rethrow_exception(err);
}

}  // namespace physar
