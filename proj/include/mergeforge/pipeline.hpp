// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mergeforge/checkpoint.hpp"
#include "mergeforge/merge.hpp"
#include "mergeforge/recipe.hpp"

namespace mergeforge {

inline nlohmann::json params_json(const MergeRecipe& r) {
    const auto p = r.merge_params();
    nlohmann::json j = {{"t", p.t}, {"density", p.density}, {"drop_prob", p.drop_prob}, {"lambda", p.lambda}};
    if (r.method == Method::linear) j["weights"] = p.weights;
    return j;
}

// Provenance stored in the merged file's __metadata__. Contains nothing
// run-dependent, so equal recipes give byte-identical files.
inline Metadata recipe_metadata(const MergeRecipe& r) {
    return {
        {"mergeforge.method", std::string(method_name(r.method))},
        {"mergeforge.params", params_json(r).dump()},
        {"mergeforge.seed", std::to_string(r.params.seed)},
    };
}

// Runs a recipe over already-resolved checkpoints, given in input_paths()
// order (base first for task-vector methods).
inline Checkpoint apply_recipe(const MergeRecipe& r, std::span<const Checkpoint> inputs, std::size_t threads = 1) {
    if (uses_base(r.method) && !r.base_model) {
        throw ValidationError(std::string(method_name(r.method)) + " needs a base model");
    }
    if (inputs.size() != r.input_paths().size()) {
        throw ValidationError("recipe expects " + std::to_string(r.input_paths().size()) + " checkpoints, got " +
                              std::to_string(inputs.size()));
    }
    Checkpoint out;
    out.metadata = recipe_metadata(r);
    const auto& reference = inputs.front();
    merge_sources(r.method, r.merge_params(), inputs, threads, [&](const std::string& name, Tensor&& t) {
        out.tensors.emplace(name, from_f32(t, r.output_dtype.value_or(reference.tensors.at(name).dtype)));
    });
    return out;
}

struct MergeSummary {
    std::string method;
    nlohmann::json params;
    std::uint64_t seed = 0;
    std::size_t tensor_count = 0;
    double wall_seconds = 0;
    std::string out_path;

    nlohmann::json to_json() const {
        return {{"method", method},         {"params", params},
                {"seed", seed},             {"tensors", tensor_count},
                {"wall_time_s", wall_seconds}, {"out_path", out_path}};
    }
};

// Streams a recipe from its input files to out_path. Each tensor is loaded,
// merged and written before the next window starts, so with one thread the
// resident tensor data stays within (inputs + 1) x the largest tensor.
inline MergeSummary run_recipe(const MergeRecipe& r, std::size_t threads = 1) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<CheckpointFile> inputs;
    for (const auto& path : r.input_paths()) inputs.push_back(CheckpointFile::open(path));

    const auto layout = merge_layout(inputs.front().layout(), r.output_dtype);
    std::size_t written = 0;
    {
        // Header first: validated layout is needed before opening the output.
        check_params(r.method, r.merge_params(), r.models.size());
        auto report = validate_compat(inputs);
        if (!report.ok()) {
            std::string msg = "checkpoints are not compatible:";
            for (const auto& line : report.describe()) msg += "\n  " + line;
            throw ValidationError(msg);
        }
        CheckpointWriter writer(r.out_path, layout, recipe_metadata(r));
        merge_sources(r.method, r.merge_params(), std::span<const CheckpointFile>(inputs), threads,
                      [&](const std::string& name, Tensor&& t) {
                          writer.write(name, t);
                          ++written;
                      });
        writer.finish();
    }
    MergeSummary s;
    s.method = std::string(method_name(r.method));
    s.params = params_json(r);
    s.seed = r.params.seed;
    s.tensor_count = written;
    s.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    s.out_path = r.out_path;
    return s;
}

}  // namespace mergeforge
