// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstddef>
#include <new>
#include <vector>

namespace mergeforge {

// Process-wide accounting of resident tensor payload bytes. Every tensor
// buffer in the library is allocated through TrackedAllocator, so these
// counters measure exactly the tensor data held in memory at any moment.
class MemoryStats {
public:
    static std::size_t resident() noexcept { return resident_.load(std::memory_order_relaxed); }
    static std::size_t peak() noexcept { return peak_.load(std::memory_order_relaxed); }

    // Restart peak tracking from the current resident level.
    static void reset_peak() noexcept { peak_.store(resident(), std::memory_order_relaxed); }

    static void add(std::size_t bytes) noexcept {
        const std::size_t now = resident_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
        std::size_t prev = peak_.load(std::memory_order_relaxed);
        while (now > prev && !peak_.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
        }
    }

    static void remove(std::size_t bytes) noexcept {
        resident_.fetch_sub(bytes, std::memory_order_relaxed);
    }

private:
    static inline std::atomic<std::size_t> resident_{0};
    static inline std::atomic<std::size_t> peak_{0};
};

template <typename T>
struct TrackedAllocator {
    using value_type = T;

    TrackedAllocator() noexcept = default;
    template <typename U>
    TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        auto* p = static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{alignof(std::max_align_t)}));
        MemoryStats::add(n * sizeof(T));
        return p;
    }

    void deallocate(T* p, std::size_t n) noexcept {
        MemoryStats::remove(n * sizeof(T));
        ::operator delete(p, std::align_val_t{alignof(std::max_align_t)});
    }

    template <typename U>
    bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

using ByteBuffer = std::vector<std::byte, TrackedAllocator<std::byte>>;

}  // namespace mergeforge
