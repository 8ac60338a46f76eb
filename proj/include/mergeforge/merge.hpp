// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/kernels.hpp"
#include "mergeforge/parallel.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

enum class Method { linear, slerp, task_arithmetic, ties, dare_ties };

inline constexpr std::string_view method_name(Method m) noexcept {
    switch (m) {
        case Method::linear: return "linear";
        case Method::slerp: return "slerp";
        case Method::task_arithmetic: return "task_arithmetic";
        case Method::ties: return "ties";
        case Method::dare_ties: return "dare_ties";
    }
    return "unknown";
}

inline std::optional<Method> parse_method(std::string_view s) noexcept {
    for (auto m : {Method::linear, Method::slerp, Method::task_arithmetic, Method::ties, Method::dare_ties}) {
        if (s == method_name(m)) return m;
    }
    return std::nullopt;
}

// Task-vector methods merge deltas against a base model.
inline constexpr bool uses_base(Method m) noexcept {
    return m == Method::task_arithmetic || m == Method::ties || m == Method::dare_ties;
}

// Hyperparameters of every method. Defaults are the midpoints of each range.
struct MergeParams {
    std::vector<double> weights;  // linear only; empty means all 1
    double t = 0.5;
    double density = 0.5;
    double drop_prob = 0.5;
    double lambda = 0.5;
    std::uint64_t seed = 0;

    friend bool operator==(const MergeParams&, const MergeParams&) = default;
};

inline void check_t(double t) {
    if (!(t >= 0 && t <= 1)) throw ValidationError("t must be in [0,1], got " + std::to_string(t));
}
inline void check_density(double d) {
    if (!(d > 0 && d <= 1)) throw ValidationError("density must be in (0,1], got " + std::to_string(d));
}
inline void check_drop_prob(double p) {
    if (!(p >= 0 && p < 1)) throw ValidationError("drop_prob must be in [0,1), got " + std::to_string(p));
}
inline void check_lambda(double l) {
    if (!(l >= 0) || !std::isfinite(l)) throw ValidationError("lambda must be >= 0, got " + std::to_string(l));
}
inline void check_weights(std::span<const double> w, std::size_t models) {
    if (w.size() != models) {
        throw ValidationError("got " + std::to_string(w.size()) + " weights for " + std::to_string(models) + " models");
    }
    double total = 0;
    for (double x : w) {
        if (!(x >= 0) || !std::isfinite(x)) throw ValidationError("weights must be finite and non-negative");
        total += x;
    }
    if (!(total > 0)) throw ValidationError("weights sum to zero");
}

// Validates the parameters the method actually reads. `models` excludes the base.
inline void check_params(Method m, const MergeParams& p, std::size_t models) {
    switch (m) {
        case Method::linear:
            if (models < 2) throw ValidationError("linear merge needs at least 2 models");
            if (!p.weights.empty()) check_weights(p.weights, models);
            break;
        case Method::slerp:
            if (models != 2) throw ValidationError("slerp merges exactly 2 models, got " + std::to_string(models));
            check_t(p.t);
            break;
        case Method::task_arithmetic:
            if (models < 1) throw ValidationError("task_arithmetic needs at least 1 model");
            check_lambda(p.lambda);
            break;
        case Method::ties:
            if (models < 1) throw ValidationError("ties needs at least 1 model");
            check_density(p.density);
            check_lambda(p.lambda);
            break;
        case Method::dare_ties:
            if (models < 1) throw ValidationError("dare_ties needs at least 1 model");
            check_drop_prob(p.drop_prob);
            check_lambda(p.lambda);
            break;
    }
}

inline void require_finite(const Tensor& t, std::string_view name) {
    if (!kernels::all_finite(t.f32())) {
        throw ValidationError("tensor '" + std::string(name) + "' contains NaN or Inf");
    }
}

// Merges one tensor. `inputs` are F32 and consumed; for task-vector methods
// inputs[0] is the base. Returns the F32 result.
inline Tensor merge_tensor(Method m, const MergeParams& p, std::string_view name, std::vector<Tensor> inputs) {
    for (const auto& t : inputs) require_finite(t, name);
    Tensor out(DType::F32, inputs.front().shape);
    switch (m) {
        case Method::linear: {
            std::vector<kernels::ConstSpan> models;
            for (const auto& t : inputs) models.emplace_back(t.f32());
            std::vector<double> w = p.weights.empty() ? std::vector<double>(inputs.size(), 1.0) : p.weights;
            kernels::linear(models, w, out.f32());
            break;
        }
        case Method::slerp:
            kernels::slerp(inputs[0].f32(), inputs[1].f32(), p.t, out.f32());
            break;
        case Method::task_arithmetic: {
            std::vector<kernels::ConstSpan> taus;
            for (std::size_t i = 1; i < inputs.size(); ++i) {
                kernels::to_task_vector(inputs[0].f32(), inputs[i].f32());
                taus.emplace_back(inputs[i].f32());
            }
            kernels::task_arithmetic(inputs[0].f32(), taus, p.lambda, out.f32());
            break;
        }
        case Method::ties:
        case Method::dare_ties: {
            std::vector<kernels::MutSpan> models;
            for (std::size_t i = 1; i < inputs.size(); ++i) models.emplace_back(inputs[i].f32());
            if (m == Method::ties) {
                kernels::ties(inputs[0].f32(), models, p.density, p.lambda, out.f32());
            } else {
                kernels::dare_ties(inputs[0].f32(), models, p.drop_prob, p.lambda, p.seed, name, out.f32());
            }
            break;
        }
    }
    return out;
}

inline Tensor load_f32(const Checkpoint& c, const std::string& name) { return to_f32(c.tensors.at(name)); }
inline Tensor load_f32(const CheckpointFile& f, const std::string& name) { return f.load_f32(name); }

// Output layout of a merge: the reference model's names and shapes, with
// dtype either forced or mirrored per tensor.
inline std::map<std::string, CheckpointWriter::Entry> merge_layout(const Layout& reference,
                                                                  std::optional<DType> out_dtype) {
    std::map<std::string, CheckpointWriter::Entry> out;
    for (const auto& [name, info] : reference) out.emplace(name, CheckpointWriter::Entry{out_dtype.value_or(info.dtype), info.shape});
    return out;
}

// Drives a merge over any tensor source (in-memory or file-backed).
// `sources[0]` is the base for task-vector methods and the dtype reference
// otherwise. Tensors are merged independently on up to `threads` threads
// and delivered to sink(name, f32_result) in canonical order.
template <typename Source, typename Sink>
void merge_sources(Method m, const MergeParams& p, std::span<const Source> sources, std::size_t threads, Sink&& sink) {
    check_params(m, p, uses_base(m) ? sources.size() - 1 : sources.size());
    auto report = validate_compat(sources);
    if (!report.ok()) {
        std::string msg = "checkpoints are not compatible:";
        for (const auto& line : report.describe()) msg += "\n  " + line;
        throw ValidationError(msg);
    }
    const Layout reference = layout_of(sources.front());
    std::vector<std::string> names;
    for (const auto& [name, info] : reference) names.push_back(name);

    ordered_parallel_for(
        names.size(), threads,
        [&](std::size_t i) {
            std::vector<Tensor> inputs;
            inputs.reserve(sources.size());
            for (const auto& s : sources) inputs.push_back(load_f32(s, names[i]));
            return merge_tensor(m, p, names[i], std::move(inputs));
        },
        [&](std::size_t i, Tensor&& out) { sink(names[i], std::move(out)); });
}

// ---------------------------------------------------------------------------
// In-memory checkpoint API. Outputs mirror the dtype of the base (or first)
// model per tensor.

namespace detail {

inline Checkpoint merge_in_memory(Method m, const MergeParams& p, std::span<const Checkpoint> sources,
                                  std::size_t threads) {
    Checkpoint out;
    const auto& reference = sources.front();
    merge_sources(m, p, sources, threads, [&](const std::string& name, Tensor&& t) {
        out.tensors.emplace(name, from_f32(t, reference.tensors.at(name).dtype));
    });
    return out;
}

inline std::vector<Checkpoint> with_base(const Checkpoint& base, std::span<const Checkpoint> models) {
    std::vector<Checkpoint> all;
    all.reserve(models.size() + 1);
    all.push_back(base);
    all.insert(all.end(), models.begin(), models.end());
    return all;
}

}  // namespace detail

inline Checkpoint linear_merge(std::span<const Checkpoint> models, std::span<const double> weights,
                               std::size_t threads = 1) {
    MergeParams p;
    p.weights.assign(weights.begin(), weights.end());
    check_weights(p.weights, models.size());
    return detail::merge_in_memory(Method::linear, p, models, threads);
}

inline Checkpoint slerp_merge(const Checkpoint& a, const Checkpoint& b, double t, std::size_t threads = 1) {
    MergeParams p;
    p.t = t;
    const Checkpoint pair[] = {a, b};
    return detail::merge_in_memory(Method::slerp, p, pair, threads);
}

inline Checkpoint ties_merge(const Checkpoint& base, std::span<const Checkpoint> models, double density,
                             double lambda, std::size_t threads = 1) {
    MergeParams p;
    p.density = density;
    p.lambda = lambda;
    return detail::merge_in_memory(Method::ties, p, detail::with_base(base, models), threads);
}

inline Checkpoint dare_ties_merge(const Checkpoint& base, std::span<const Checkpoint> models, double drop_prob,
                                  double lambda, std::uint64_t seed, std::size_t threads = 1) {
    MergeParams p;
    p.drop_prob = drop_prob;
    p.lambda = lambda;
    p.seed = seed;
    return detail::merge_in_memory(Method::dare_ties, p, detail::with_base(base, models), threads);
}

// ---------------------------------------------------------------------------
// Task-vector primitives

// Per-tensor F32 deltas of a fine-tuned model against the shared base.
struct TaskVector {
    Checkpoint deltas;
    std::string source_id;
};

struct SignTensor {
    Shape shape;
    std::vector<std::int8_t> values;

    friend bool operator==(const SignTensor&, const SignTensor&) = default;
};

struct SignMap {
    std::map<std::string, SignTensor> signs;
};

namespace detail {

inline void require_same_layout(const Layout& want, const Layout& got, std::string_view what) {
    const Layout pair[] = {want, got};
    auto report = validate_compat(std::span<const Layout>(pair));
    // dtype is irrelevant here: task vectors are always F32.
    for (const auto& mm : report.mismatches) {
        if (mm.reason != CompatMismatch::Reason::dtype_differs) {
            throw ValidationError(std::string(what) + ": " + mm.name + ": " + mm.reason_string());
        }
    }
}

inline void require_same_layout(std::span<const TaskVector> tvs) {
    if (tvs.empty()) throw ValidationError("need at least one task vector");
    const Layout first = layout_of(tvs.front().deltas);
    for (std::size_t i = 1; i < tvs.size(); ++i) {
        require_same_layout(first, layout_of(tvs[i].deltas), "task vector " + std::to_string(i));
    }
}

inline std::vector<kernels::ConstSpan> spans_at(std::span<const TaskVector> tvs, const std::string& name) {
    std::vector<kernels::ConstSpan> out;
    for (const auto& tv : tvs) out.emplace_back(tv.deltas.tensors.at(name).f32());
    return out;
}

}  // namespace detail

inline TaskVector task_vector(const Checkpoint& base, const Checkpoint& model, std::string source_id = {}) {
    const Checkpoint pair[] = {base, model};
    auto report = validate_compat(std::span<const Checkpoint>(pair));
    if (!report.ok()) throw ValidationError("task_vector: " + report.describe().front());
    TaskVector tv;
    tv.source_id = std::move(source_id);
    for (const auto& [name, b] : base.tensors) {
        Tensor bf = to_f32(b);
        Tensor delta = to_f32(model.tensors.at(name));
        require_finite(bf, name);
        require_finite(delta, name);
        kernels::to_task_vector(bf.f32(), delta.f32());
        tv.deltas.tensors.emplace(name, std::move(delta));
    }
    return tv;
}

inline Checkpoint task_arithmetic_merge(const Checkpoint& base, std::span<const TaskVector> tvs, double lambda) {
    check_lambda(lambda);
    const Layout base_layout = layout_of(base);
    for (std::size_t i = 0; i < tvs.size(); ++i) {
        detail::require_same_layout(base_layout, layout_of(tvs[i].deltas), "task vector " + std::to_string(i));
    }
    Checkpoint out;
    for (const auto& [name, b] : base.tensors) {
        Tensor bf = to_f32(b);
        require_finite(bf, name);
        Tensor merged(DType::F32, b.shape);
        kernels::task_arithmetic(bf.f32(), detail::spans_at(tvs, name), lambda, merged.f32());
        out.tensors.emplace(name, from_f32(merged, b.dtype));
    }
    return out;
}

inline TaskVector trim(TaskVector tv, double density) {
    check_density(density);
    for (auto& [name, t] : tv.deltas.tensors) kernels::trim(t.f32(), density);
    return tv;
}

inline SignMap elect_sign(std::span<const TaskVector> tvs) {
    detail::require_same_layout(tvs);
    SignMap out;
    for (const auto& [name, t] : tvs.front().deltas.tensors) {
        SignTensor s{t.shape, std::vector<std::int8_t>(t.size())};
        kernels::elect_sign(detail::spans_at(tvs, name), s.values);
        out.signs.emplace(name, std::move(s));
    }
    return out;
}

inline TaskVector disjoint_merge(std::span<const TaskVector> tvs, const SignMap& signs) {
    detail::require_same_layout(tvs);
    TaskVector out;
    out.source_id = "disjoint_merge";
    for (const auto& [name, t] : tvs.front().deltas.tensors) {
        auto it = signs.signs.find(name);
        if (it == signs.signs.end() || it->second.shape != t.shape) {
            throw ValidationError("sign map does not match task vectors at '" + name + "'");
        }
        Tensor merged(DType::F32, t.shape);
        kernels::disjoint_merge(detail::spans_at(tvs, name), it->second.values, merged.f32());
        out.deltas.tensors.emplace(name, std::move(merged));
    }
    return out;
}

// `model_index` selects the model's independent mask stream; it is the
// model's position in the recipe when called from DARE-TIES.
inline TaskVector dare(TaskVector tv, double drop_prob, std::uint64_t seed, std::uint64_t model_index = 0) {
    check_drop_prob(drop_prob);
    for (auto& [name, t] : tv.deltas.tensors) {
        SplitMix64 stream(dare_subseed(seed, name, model_index));
        kernels::dare(t.f32(), drop_prob, stream);
    }
    return tv;
}

}  // namespace mergeforge
