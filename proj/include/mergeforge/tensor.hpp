// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/error.hpp"
#include "mergeforge/memory.hpp"

namespace mergeforge {

enum class DType { F32, BF16 };

constexpr std::size_t dtype_size(DType dtype) noexcept { return dtype == DType::F32 ? 4 : 2; }

constexpr std::string_view dtype_name(DType dtype) noexcept {
    return dtype == DType::F32 ? "F32" : "BF16";
}

inline std::optional<DType> parse_dtype(std::string_view name) noexcept {
    if (name == "F32") return DType::F32;
    if (name == "BF16") return DType::BF16;
    return std::nullopt;
}

using Shape = std::vector<std::uint64_t>;

// Product of dims; the empty shape is a scalar with one element.
inline std::uint64_t element_count(const Shape& shape) noexcept {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// BF16 is the upper half of an IEEE binary32, so widening is exact.
inline float bf16_to_f32(std::uint16_t bits) noexcept {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

// Round to nearest, ties to even. NaN payloads are kept quiet.
inline std::uint16_t f32_to_bf16(float value) noexcept {
    const auto bits = std::bit_cast<std::uint32_t>(value);
    if ((bits & 0x7fffffffu) > 0x7f800000u) {
        return static_cast<std::uint16_t>((bits >> 16) | 0x0040u);
    }
    const std::uint32_t rounding = 0x7fffu + ((bits >> 16) & 1u);
    return static_cast<std::uint16_t>((bits + rounding) >> 16);
}

// Dense row-major little-endian tensor. The payload lives in a tracked byte
// buffer so resident tensor memory can be measured.
struct Tensor {
    DType dtype = DType::F32;
    Shape shape;
    ByteBuffer data;

    Tensor() = default;
    Tensor(DType dtype_, Shape shape_)
        : dtype(dtype_), shape(std::move(shape_)), data(element_count(shape) * dtype_size(dtype)) {}

    static Tensor from_f32(Shape shape, std::span<const float> values) {
        Tensor t(DType::F32, std::move(shape));
        if (values.size() != t.size()) {
            throw ValidationError("value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape_string(t.shape));
        }
        std::memcpy(t.data.data(), values.data(), values.size_bytes());
        return t;
    }

    static Tensor from_f32(Shape shape, std::initializer_list<float> values) {
        return from_f32(std::move(shape), std::span<const float>(values.begin(), values.size()));
    }

    // Convenience for 1-D tensors.
    static Tensor vector(std::initializer_list<float> values) {
        return from_f32({values.size()}, values);
    }

    std::size_t size() const noexcept { return static_cast<std::size_t>(element_count(shape)); }
    std::size_t byte_size() const noexcept { return data.size(); }

    std::span<float> f32() {
        require(DType::F32);
        return {reinterpret_cast<float*>(data.data()), size()};
    }
    std::span<const float> f32() const {
        require(DType::F32);
        return {reinterpret_cast<const float*>(data.data()), size()};
    }
    std::span<std::uint16_t> bf16() {
        require(DType::BF16);
        return {reinterpret_cast<std::uint16_t*>(data.data()), size()};
    }
    std::span<const std::uint16_t> bf16() const {
        require(DType::BF16);
        return {reinterpret_cast<const std::uint16_t*>(data.data()), size()};
    }

    // Element i widened to float regardless of storage dtype.
    float at(std::size_t i) const {
        return dtype == DType::F32 ? f32()[i] : bf16_to_f32(bf16()[i]);
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.dtype == b.dtype && a.shape == b.shape && a.data == b.data;
    }

private:
    void require(DType want) const {
        if (dtype != want) {
            throw ValidationError("tensor holds " + std::string(dtype_name(dtype)) + ", not " +
                                  std::string(dtype_name(want)));
        }
    }
};

inline Tensor to_f32(const Tensor& t) {
    if (t.dtype == DType::F32) return t;
    Tensor out(DType::F32, t.shape);
    auto src = t.bf16();
    auto dst = out.f32();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = bf16_to_f32(src[i]);
    return out;
}

inline Tensor to_f32(Tensor&& t) {
    if (t.dtype == DType::F32) return std::move(t);
    return to_f32(static_cast<const Tensor&>(t));
}

inline Tensor from_f32(const Tensor& t, DType target) {
    if (t.dtype == target) return t;
    if (target == DType::F32) return to_f32(t);
    Tensor out(DType::BF16, t.shape);
    auto src = t.f32();
    auto dst = out.bf16();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f32_to_bf16(src[i]);
    return out;
}

}  // namespace mergeforge
