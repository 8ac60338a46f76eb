// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mergeforge/checkpoint.hpp"
#include "mergeforge/merge.hpp"

namespace mergeforge {

struct ModelRef {
    std::string path;
    double weight = 1.0;

    friend bool operator==(const ModelRef&, const ModelRef&) = default;
};

// A complete, declarative description of one merge. `params.weights` is not
// used; per-model weights live on the model entries.
struct MergeRecipe {
    Method method = Method::linear;
    std::optional<std::string> base_model;
    std::vector<ModelRef> models;
    MergeParams params;
    std::optional<DType> output_dtype;
    std::string out_path;

    MergeParams merge_params() const {
        MergeParams p = params;
        p.weights.clear();
        if (method == Method::linear) {
            for (const auto& m : models) p.weights.push_back(m.weight);
        }
        return p;
    }

    // Input paths in merge order: base first for task-vector methods.
    std::vector<std::string> input_paths() const {
        std::vector<std::string> out;
        if (uses_base(method)) out.push_back(*base_model);
        for (const auto& m : models) out.push_back(m.path);
        return out;
    }

    friend bool operator==(const MergeRecipe&, const MergeRecipe&) = default;
};

inline constexpr std::size_t kMaxRecipeBytes = 1 << 20;

class RecipeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

namespace detail {

inline std::pair<std::size_t, std::size_t> line_col(std::string_view text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.count(key)) throw RecipeError("field '" + where + key + "': unknown key");
    }
}

inline double number_field(const nlohmann::json& v, const std::string& field) {
    if (!v.is_number()) throw RecipeError("field '" + field + "': expected a number, got " + v.dump());
    return v.get<double>();
}

inline std::string string_field(const nlohmann::json& v, const std::string& field) {
    if (!v.is_string()) throw RecipeError("field '" + field + "': expected a string, got " + v.dump());
    auto s = v.get<std::string>();
    if (s.empty()) throw RecipeError("field '" + field + "': must not be empty");
    return s;
}

template <typename Check>
void range_field(const std::string& field, double value, Check check) {
    try {
        check(value);
    } catch (const ValidationError& e) {
        throw RecipeError("field '" + field + "': " + e.what());
    }
}

}  // namespace detail

// Parses a JSON recipe document. Every structural or range problem is
// reported as a RecipeError naming the line/column or the field.
inline MergeRecipe parse_recipe(std::string_view text) {
    if (text.size() > kMaxRecipeBytes) {
        throw RecipeError("recipe exceeds " + std::to_string(kMaxRecipeBytes) + " bytes");
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        auto [line, col] = detail::line_col(text, e.byte > 0 ? e.byte - 1 : 0);
        throw RecipeError("syntax error at line " + std::to_string(line) + " column " + std::to_string(col) +
                          ": " + e.what());
    }
    if (!doc.is_object()) throw RecipeError("recipe must be a JSON object");
    detail::reject_unknown_keys(doc, {"method", "base_model", "models", "params", "out_path", "output_dtype"}, "");

    MergeRecipe r;
    if (!doc.contains("method")) throw RecipeError("field 'method': missing");
    const auto method_text = detail::string_field(doc["method"], "method");
    const auto method = parse_method(method_text);
    if (!method) throw RecipeError("field 'method': unknown method '" + method_text + "'");
    r.method = *method;

    if (doc.contains("base_model") && !doc["base_model"].is_null()) {
        r.base_model = detail::string_field(doc["base_model"], "base_model");
    }

    if (!doc.contains("models")) throw RecipeError("field 'models': missing");
    const auto& models = doc["models"];
    if (!models.is_array()) throw RecipeError("field 'models': expected an array");
    for (std::size_t i = 0; i < models.size(); ++i) {
        const std::string where = "models[" + std::to_string(i) + "]";
        const auto& m = models[i];
        if (!m.is_object()) throw RecipeError("field '" + where + "': expected an object");
        detail::reject_unknown_keys(m, {"path", "weight"}, where + ".");
        if (!m.contains("path")) throw RecipeError("field '" + where + ".path': missing");
        ModelRef ref;
        ref.path = detail::string_field(m["path"], where + ".path");
        if (m.contains("weight")) {
            ref.weight = detail::number_field(m["weight"], where + ".weight");
            if (!(ref.weight >= 0)) throw RecipeError("field '" + where + ".weight': must be >= 0");
        }
        r.models.push_back(std::move(ref));
    }

    if (doc.contains("params")) {
        const auto& p = doc["params"];
        if (!p.is_object()) throw RecipeError("field 'params': expected an object");
        detail::reject_unknown_keys(p, {"t", "density", "drop_prob", "lambda", "seed"}, "params.");
        if (p.contains("t")) r.params.t = detail::number_field(p["t"], "params.t");
        if (p.contains("density")) r.params.density = detail::number_field(p["density"], "params.density");
        if (p.contains("drop_prob")) r.params.drop_prob = detail::number_field(p["drop_prob"], "params.drop_prob");
        if (p.contains("lambda")) r.params.lambda = detail::number_field(p["lambda"], "params.lambda");
        if (p.contains("seed")) {
            if (!p["seed"].is_number_unsigned()) {
                throw RecipeError("field 'params.seed': expected an unsigned 64-bit integer");
            }
            r.params.seed = p["seed"].get<std::uint64_t>();
        }
    }
    detail::range_field("params.t", r.params.t, check_t);
    detail::range_field("params.density", r.params.density, check_density);
    detail::range_field("params.drop_prob", r.params.drop_prob, check_drop_prob);
    detail::range_field("params.lambda", r.params.lambda, check_lambda);

    if (!doc.contains("out_path")) throw RecipeError("field 'out_path': missing");
    r.out_path = detail::string_field(doc["out_path"], "out_path");

    if (doc.contains("output_dtype") && !doc["output_dtype"].is_null()) {
        const auto name = detail::string_field(doc["output_dtype"], "output_dtype");
        r.output_dtype = parse_dtype(name);
        if (!r.output_dtype) throw RecipeError("field 'output_dtype': unknown dtype '" + name + "'");
    }

    // Arity and base-model rules.
    switch (r.method) {
        case Method::linear:
            if (r.models.size() < 2) throw RecipeError("field 'models': linear needs at least 2 models");
            {
                double total = 0;
                for (const auto& m : r.models) total += m.weight;
                if (!(total > 0)) throw RecipeError("field 'models': weights sum to zero");
            }
            break;
        case Method::slerp:
            if (r.models.size() != 2) {
                throw RecipeError("field 'models': slerp needs exactly 2 models, got " + std::to_string(r.models.size()));
            }
            break;
        default:
            if (!r.base_model) {
                throw RecipeError("field 'base_model': missing (required by " + std::string(method_name(r.method)) + ")");
            }
            if (r.models.empty()) throw RecipeError("field 'models': at least 1 model required");
            break;
    }
    return r;
}

inline MergeRecipe load_recipe(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read recipe '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_recipe(ss.str());
}

inline nlohmann::json recipe_to_json(const MergeRecipe& r) {
    nlohmann::json models = nlohmann::json::array();
    for (const auto& m : r.models) models.push_back({{"path", m.path}, {"weight", m.weight}});
    nlohmann::json doc = {
        {"method", std::string(method_name(r.method))},
        {"models", models},
        {"params",
         {{"t", r.params.t},
          {"density", r.params.density},
          {"drop_prob", r.params.drop_prob},
          {"lambda", r.params.lambda},
          {"seed", r.params.seed}}},
        {"out_path", r.out_path},
    };
    if (r.base_model) doc["base_model"] = *r.base_model;
    if (r.output_dtype) doc["output_dtype"] = std::string(dtype_name(*r.output_dtype));
    return doc;
}

inline std::string serialize_recipe(const MergeRecipe& r) { return recipe_to_json(r).dump(2) + "\n"; }

// Looks up a checkpoint's layout; nullopt when the path does not exist.
using LayoutResolver = std::function<std::optional<Layout>(const std::string& path)>;

inline std::optional<Layout> resolve_layout_from_disk(const std::string& path) {
    if (!std::filesystem::exists(path)) return std::nullopt;
    return CheckpointFile::open(path).layout();
}

// Diagnostics for a parsed recipe; empty means every input exists, parses
// and is compatible with the others.
inline std::vector<std::string> validate_recipe(const MergeRecipe& r,
                                                const LayoutResolver& resolve = resolve_layout_from_disk) {
    std::vector<std::string> diags;
    std::vector<Layout> layouts;
    std::vector<std::string> paths = r.input_paths();
    for (const auto& path : paths) {
        try {
            auto layout = resolve(path);
            if (!layout) {
                diags.push_back("path '" + path + "': does not exist");
                continue;
            }
            layouts.push_back(std::move(*layout));
        } catch (const std::exception& e) {
            diags.push_back("path '" + path + "': " + e.what());
        }
    }
    if (diags.empty() && !layouts.empty()) {
        auto report = validate_compat(std::span<const Layout>(layouts));
        for (const auto& line : report.describe()) diags.push_back("compat: " + line);
    }
    return diags;
}

}  // namespace mergeforge
