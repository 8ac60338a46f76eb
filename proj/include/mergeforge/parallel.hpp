// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <optional>
#include <thread>
#include <vector>

namespace mergeforge {

// Computes produce(i) for i in [0, count) on up to `threads` threads and
// hands each result to consume(i, result) strictly in index order. Work
// proceeds in windows of `threads` items, so at most `threads` results are
// alive at once. The first exception (lowest index) is rethrown after the
// window drains.
template <typename Produce, typename Consume>
void ordered_parallel_for(std::size_t count, std::size_t threads, Produce&& produce, Consume&& consume) {
    using Result = decltype(produce(std::size_t{}));
    threads = std::max<std::size_t>(1, threads);
    for (std::size_t start = 0; start < count; start += threads) {
        const std::size_t window = std::min(threads, count - start);
        std::vector<std::optional<Result>> results(window);
        std::vector<std::exception_ptr> errors(window);
        auto run = [&](std::size_t w) {
            try {
                results[w].emplace(produce(start + w));
            } catch (...) {
                errors[w] = std::current_exception();
            }
        };
        if (window == 1) {
            run(0);
        } else {
            std::vector<std::jthread> pool;
            pool.reserve(window);
            for (std::size_t w = 0; w < window; ++w) pool.emplace_back(run, w);
        }
        for (std::size_t w = 0; w < window; ++w) {
            if (errors[w]) std::rethrow_exception(errors[w]);
            consume(start + w, std::move(*results[w]));
            results[w].reset();
        }
    }
}

// results[i] = fn(i) with at most `limit` calls in flight. Workers pull the
// next index as soon as they finish, so one slow item does not stall the
// rest. fn must not throw.
template <typename Fn>
auto bounded_parallel_map(std::size_t count, std::size_t limit, Fn&& fn) {
    using Result = decltype(fn(std::size_t{}));
    std::vector<std::optional<Result>> slots(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < count;) slots[i].emplace(fn(i));
    };
    const std::size_t n = std::min(std::max<std::size_t>(1, limit), count);
    if (n <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
    }
    std::vector<Result> out;
    out.reserve(count);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

}  // namespace mergeforge
