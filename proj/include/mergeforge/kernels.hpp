// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Per-tensor merge kernels on flat F32 spans. Every kernel is a pure function
// of its inputs; kernels that take `std::span<float>` model buffers consume
// them (the buffer is turned into a task vector in place) so a k-input merge
// never holds more than k inputs plus one output.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "mergeforge/error.hpp"
#include "mergeforge/rng.hpp"

namespace mergeforge::kernels {

using ConstSpan = std::span<const float>;
using MutSpan = std::span<float>;

inline bool all_finite(ConstSpan x) noexcept {
    return std::all_of(x.begin(), x.end(), [](float v) { return std::isfinite(v); });
}

inline int sign_of(double v) noexcept { return (v > 0) - (v < 0); }

// ceil(density * n) for density in (0, 1]. A relative slack of 1e-12 keeps
// decimal densities exact: 0.1 * 30 keeps 3 even though the double 0.1 is
// slightly above one tenth.
inline std::size_t keep_count(double density, std::size_t n) noexcept {
    const double k = std::ceil(density * static_cast<double>(n) * (1 - 1e-12));
    return std::min(n, static_cast<std::size_t>(std::max(k, 1.0)));
}

// ---------------------------------------------------------------------------
// Linear

inline void linear(std::span<const ConstSpan> models, std::span<const double> weights, MutSpan out) {
    double total = 0;
    for (double w : weights) total += w;
    std::vector<double> norm(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) norm[i] = weights[i] / total;
    for (std::size_t j = 0; j < out.size(); ++j) {
        double acc = 0;
        for (std::size_t i = 0; i < models.size(); ++i) acc += norm[i] * static_cast<double>(models[i][j]);
        out[j] = static_cast<float>(acc);
    }
}

// ---------------------------------------------------------------------------
// SLERP on the flattened tensors.

inline void slerp(ConstSpan a, ConstSpan b, double t, MutSpan out) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double x = a[j], y = b[j];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    double ca = 1 - t, cb = t;
    if (na > 0 && nb > 0) {
        const double cos_omega = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
        const double omega = std::acos(cos_omega);
        const double sin_omega = std::sin(omega);
        if (sin_omega >= 1e-6) {
            ca = std::sin((1 - t) * omega) / sin_omega;
            cb = std::sin(t * omega) / sin_omega;
        }
    }
    for (std::size_t j = 0; j < a.size(); ++j) {
        out[j] = static_cast<float>(ca * static_cast<double>(a[j]) + cb * static_cast<double>(b[j]));
    }
}

// ---------------------------------------------------------------------------
// Task vectors

// model <- model - base, in F32.
inline void to_task_vector(ConstSpan base, MutSpan model) noexcept {
    for (std::size_t j = 0; j < model.size(); ++j) model[j] = model[j] - base[j];
}

inline void task_arithmetic(ConstSpan base, std::span<const ConstSpan> taus, double lambda, MutSpan out) {
    for (std::size_t j = 0; j < out.size(); ++j) {
        double sum = 0;
        for (const auto& tau : taus) sum += tau[j];
        out[j] = static_cast<float>(static_cast<double>(base[j]) + lambda * sum);
    }
}

// Keeps the ceil(density*n) entries of largest magnitude and zeroes the
// rest; among equal magnitudes at the threshold the lower index is kept.
// The threshold is found by a two-pass 16-bit radix select over the IEEE
// bit patterns of |x|, which order the same way as the magnitudes.
inline void trim(MutSpan tau, double density) {
    const std::size_t n = tau.size();
    const std::size_t k = keep_count(density, n);
    if (k >= n) return;

    auto key = [](float v) { return std::bit_cast<std::uint32_t>(v) & 0x7fffffffu; };

    std::vector<std::size_t> hist(1 << 16);
    for (float v : tau) ++hist[key(v) >> 16];
    std::size_t above = 0;  // entries in buckets strictly above the chosen one
    std::uint32_t hi = 0xffff;
    for (;; --hi) {
        if (above + hist[hi] >= k) break;
        above += hist[hi];
    }
    std::fill(hist.begin(), hist.end(), 0);
    for (float v : tau) {
        const auto kv = key(v);
        if ((kv >> 16) == hi) ++hist[kv & 0xffff];
    }
    std::uint32_t lo = 0xffff;
    for (;; --lo) {
        if (above + hist[lo] >= k) break;
        above += hist[lo];
    }
    const std::uint32_t threshold = (hi << 16) | lo;
    std::size_t ties_left = k - above;
    for (auto& v : tau) {
        const auto kv = key(v);
        if (kv > threshold) continue;
        if (kv == threshold && ties_left > 0) {
            --ties_left;
            continue;
        }
        v = 0.0f;
    }
}

inline int elect_sign_at(std::span<const ConstSpan> taus, std::size_t j) noexcept {
    double sum = 0;
    for (const auto& tau : taus) sum += tau[j];
    return sign_of(sum);
}

// Mean of the entries whose sign agrees with the elected (nonzero) sign.
inline float disjoint_mean_at(std::span<const ConstSpan> taus, std::size_t j, int sign) noexcept {
    if (sign == 0) return 0.0f;
    double sum = 0;
    std::size_t count = 0;
    for (const auto& tau : taus) {
        if (sign_of(tau[j]) == sign) {
            sum += tau[j];
            ++count;
        }
    }
    return count ? static_cast<float>(sum / static_cast<double>(count)) : 0.0f;
}

inline void elect_sign(std::span<const ConstSpan> taus, std::span<std::int8_t> signs) noexcept {
    for (std::size_t j = 0; j < signs.size(); ++j) signs[j] = static_cast<std::int8_t>(elect_sign_at(taus, j));
}

inline void disjoint_merge(std::span<const ConstSpan> taus, std::span<const std::int8_t> signs, MutSpan out) noexcept {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = disjoint_mean_at(taus, j, signs[j]);
}

// Drops each entry with probability p and rescales survivors by 1/(1-p).
// One stream value is consumed per element, in flat-index order.
inline void dare(MutSpan tau, double drop_prob, SplitMix64& stream) noexcept {
    const double keep_scale = 1.0 - drop_prob;
    for (auto& v : tau) {
        if (stream.next_unit() < drop_prob) {
            v = 0.0f;
        } else {
            v = static_cast<float>(static_cast<double>(v) / keep_scale);
        }
    }
}

// out = base + lambda * disjoint_merge(elect_sign(taus)), with the merged
// delta rounded to F32 before scaling, exactly as the composed operations.
inline void sign_merge_into(ConstSpan base, std::span<const ConstSpan> taus, double lambda, MutSpan out) noexcept {
    for (std::size_t j = 0; j < out.size(); ++j) {
        const float merged = disjoint_mean_at(taus, j, elect_sign_at(taus, j));
        out[j] = static_cast<float>(static_cast<double>(base[j]) + lambda * static_cast<double>(merged));
    }
}

// TIES: task vectors, magnitude trim, sign election, disjoint mean.
inline void ties(ConstSpan base, std::span<const MutSpan> models, double density, double lambda, MutSpan out) {
    std::vector<ConstSpan> taus;
    for (const auto& m : models) {
        to_task_vector(base, m);
        trim(m, density);
        taus.emplace_back(m);
    }
    sign_merge_into(base, taus, lambda, out);
}

// DARE-TIES: as TIES, with the random drop-and-rescale replacing the trim.
// Model i draws its mask from dare_subseed(seed, tensor_name, i).
inline void dare_ties(ConstSpan base, std::span<const MutSpan> models, double drop_prob, double lambda,
                      std::uint64_t seed, std::string_view tensor_name, MutSpan out) {
    std::vector<ConstSpan> taus;
    for (std::size_t i = 0; i < models.size(); ++i) {
        to_task_vector(base, models[i]);
        SplitMix64 stream(dare_subseed(seed, tensor_name, i));
        dare(models[i], drop_prob, stream);
        taus.emplace_back(models[i]);
    }
    sign_merge_into(base, taus, lambda, out);
}

}  // namespace mergeforge::kernels
