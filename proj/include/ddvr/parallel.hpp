#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace ddvr {

/// Resolves a --threads style request; values < 1 mean hardware concurrency.
inline int resolve_threads(int requested)
{
    if (requested >= 1)
        return requested;
    return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

/// Splits [0, n) into contiguous ranges, one per worker, and runs
/// fn(worker, begin, end) on each. Range boundaries depend only on n and
/// the worker count. The first exception thrown by a worker is rethrown.
template <class Fn>
void parallel_ranges(std::size_t n, int threads, Fn&& fn)
{
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(resolve_threads(threads)),
                                                      std::max<std::size_t>(n, 1));
    if (workers <= 1) {
        fn(std::size_t{0}, std::size_t{0}, n);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t b = n * w / workers, e = n * (w + 1) / workers;
        pool.emplace_back([&, w, b, e] {
            try {
                fn(w, b, e);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

/// Number of workers parallel_ranges will use for n items.
inline std::size_t worker_count(std::size_t n, int threads)
{
    return std::min<std::size_t>(static_cast<std::size_t>(resolve_threads(threads)), std::max<std::size_t>(n, 1));
}

} // namespace ddvr
