// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

namespace mergeforge {

// SplitMix64 finalizer (Steele, Lea & Flood).
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Counter-based SplitMix64 stream. Output i is splitmix64(state + i*golden)
// so any value is reproducible from the seed alone.
class SplitMix64 {
public:
    explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

    constexpr std::uint64_t next() noexcept {
        const std::uint64_t out = splitmix64(state_);
        state_ += 0x9e3779b97f4a7c15ull;
        return out;
    }

    // Uniform double in [0, 1) from the top 53 bits.
    constexpr double next_unit() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

private:
    std::uint64_t state_;
};

// Seed of the DARE drop mask for one tensor of one model. Depends only on
// the recipe seed, the tensor name and the model's position in the recipe,
// never on which thread processes the tensor.
constexpr std::uint64_t dare_subseed(std::uint64_t global_seed, std::string_view tensor_name,
                                     std::uint64_t model_index) noexcept {
    return splitmix64(global_seed ^ fnv1a64(tensor_name) ^ model_index);
}

}  // namespace mergeforge
