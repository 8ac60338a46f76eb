// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// (mu+lambda) evolution strategy over merge hyperparameters with a
// black-box fitness evaluator. Higher fitness is better.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "json.hpp"
#include "mergeforge/error.hpp"
#include "mergeforge/parallel.hpp"
#include "mergeforge/recipe.hpp"
#include "mergeforge/rng.hpp"

namespace mergeforge {

struct Dim {
    std::string name;
    double lower = 0;
    double upper = 1;

    friend bool operator==(const Dim&, const Dim&) = default;
};

struct SearchSpace {
    std::vector<Dim> dims;

    std::size_t size() const { return dims.size(); }
    bool contains(const std::vector<double>& x) const {
        if (x.size() != dims.size()) return false;
        for (std::size_t j = 0; j < x.size(); ++j) {
            if (!(x[j] >= dims[j].lower && x[j] <= dims[j].upper)) return false;
        }
        return true;
    }
};

inline bool is_weight_dim(const std::string& name, std::size_t* index = nullptr) {
    if (name.rfind("weight_", 0) != 0 || name.size() == 7) return false;
    std::size_t i = 0;
    for (char c : name.substr(7)) {
        if (c < '0' || c > '9') return false;
        i = i * 10 + static_cast<std::size_t>(c - '0');
        if (i > 1'000'000) return false;
    }
    if (index) *index = i;
    return true;
}

inline void validate_space(const SearchSpace& s) {
    std::set<std::string> seen;
    for (const auto& d : s.dims) {
        static const std::set<std::string> fixed = {"lambda", "density", "drop_prob", "t"};
        if (!fixed.count(d.name) && !is_weight_dim(d.name)) {
            throw ValidationError("search space: unknown dim '" + d.name + "'");
        }
        if (!seen.insert(d.name).second) throw ValidationError("search space: duplicate dim '" + d.name + "'");
        if (!std::isfinite(d.lower) || !std::isfinite(d.upper) || !(d.lower < d.upper)) {
            throw ValidationError("search space: dim '" + d.name + "' needs finite lower < upper");
        }
    }
}

// {"dims": [{"name": "lambda", "lower": 0.1, "upper": 1.0}, ...]}
inline SearchSpace parse_space(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(std::string("search space: ") + e.what());
    }
    if (!j.is_object() || !j.contains("dims") || !j["dims"].is_array()) {
        throw ValidationError("search space: expected an object with a 'dims' array");
    }
    SearchSpace s;
    for (const auto& d : j["dims"]) {
        if (!d.is_object() || !d.contains("name") || !d["name"].is_string() || !d.contains("lower") ||
            !d["lower"].is_number() || !d.contains("upper") || !d["upper"].is_number()) {
            throw ValidationError("search space: each dim needs string 'name' and numeric 'lower', 'upper'");
        }
        s.dims.push_back({d["name"].get<std::string>(), d["lower"].get<double>(), d["upper"].get<double>()});
    }
    validate_space(s);
    return s;
}

inline SearchSpace load_space(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open search space '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_space(ss.str());
}

struct Candidate {
    std::vector<double> x;
    std::optional<double> fitness;
    std::size_t eval_index = 0;  // position in evaluation order, for stable ties
};

struct GenerationStats {
    double best_fitness = 0;  // best ever, up to and including this generation
    double mean_fitness = 0;  // mean over the candidates evaluated in this generation
    double sigma = 0;         // step size as a fraction of each dim's range

    friend bool operator==(const GenerationStats&, const GenerationStats&) = default;
};

struct EvolveLog {
    std::vector<GenerationStats> generations;
    std::size_t evaluations = 0;

    std::string to_csv() const {
        std::ostringstream out;
        out.precision(17);
        out << "generation,best_fitness,mean_fitness,sigma\n";
        for (std::size_t g = 0; g < generations.size(); ++g) {
            out << g << ',' << generations[g].best_fitness << ',' << generations[g].mean_fitness << ','
                << generations[g].sigma << '\n';
        }
        return out.str();
    }
};

struct EvolveResult {
    Candidate best;
    EvolveLog log;
};

// Evaluator(x, eval_index) returns a finite fitness or throws.
using Evaluator = std::function<double(const std::vector<double>& x, std::size_t eval_index)>;

class EvolveAborted : public Error {
public:
    EvolveAborted(const std::string& what, EvolveResult partial)
        : Error(Kind::io, what), partial_(std::move(partial)) {}
    const EvolveResult& partial() const noexcept { return partial_; }

private:
    EvolveResult partial_;
};

struct EvolveOptions {
    std::size_t mu = 4;
    std::size_t lambda = 12;
    double initial_sigma = 0.3;
    std::size_t retries = 3;
    std::size_t concurrency = 1;
};

namespace detail {

inline double normal(SplitMix64& rng) {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - rng.next_unit();
    const double u2 = rng.next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Fitness-descending, earlier evaluation first on ties.
inline bool better(const Candidate& a, const Candidate& b) {
    if (*a.fitness != *b.fitness) return *a.fitness > *b.fitness;
    return a.eval_index < b.eval_index;
}

}  // namespace detail

inline EvolveResult evolve(const SearchSpace& space, const Evaluator& fitness, std::size_t budget, std::uint64_t seed,
                           const EvolveOptions& opt = {}) {
    validate_space(space);
    const std::size_t pop = opt.mu + opt.lambda;
    if (budget < pop) {
        throw UsageError("budget " + std::to_string(budget) + " is below the population size " + std::to_string(pop));
    }
    const std::size_t n = space.size();
    SplitMix64 rng(seed);
    EvolveResult result;
    double sigma = opt.initial_sigma;

    // Evaluates a batch in order; false if some candidate exhausted its retries.
    std::string failure;
    auto evaluate = [&](std::vector<Candidate>& batch) {
        struct Outcome {
            std::optional<double> fitness;
            std::string error;
        };
        for (auto& c : batch) c.eval_index = result.log.evaluations++;
        ordered_parallel_for(
            batch.size(), opt.concurrency,
            [&](std::size_t i) {
                Outcome o;
                for (std::size_t attempt = 0; attempt <= opt.retries; ++attempt) {
                    try {
                        const double f = fitness(batch[i].x, batch[i].eval_index);
                        if (std::isfinite(f)) {
                            o.fitness = f;
                            return o;
                        }
                        o.error = "non-finite fitness";
                    } catch (const std::exception& e) {
                        o.error = e.what();
                    }
                }
                return o;
            },
            [&](std::size_t i, Outcome&& o) {
                batch[i].fitness = o.fitness;
                if (!o.fitness && failure.empty()) {
                    failure = "evaluation " + std::to_string(batch[i].eval_index) + " failed: " + o.error;
                }
            });
        return failure.empty();
    };
    auto abort = [&]() -> EvolveResult { throw EvolveAborted(failure, result); };
    auto record = [&](const std::vector<Candidate>& batch) {
        double sum = 0;
        for (const auto& c : batch) {
            sum += *c.fitness;
            if (!result.best.fitness || detail::better(c, result.best)) result.best = c;
        }
        result.log.generations.push_back({*result.best.fitness, sum / static_cast<double>(batch.size()), sigma});
    };

    std::vector<Candidate> population(pop);
    for (auto& c : population) {
        c.x.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            const auto& d = space.dims[j];
            c.x[j] = std::min(d.upper, d.lower + rng.next_unit() * (d.upper - d.lower));
        }
    }
    if (!evaluate(population)) return abort();
    record(population);
    std::stable_sort(population.begin(), population.end(), detail::better);
    population.resize(opt.mu);

    while (result.log.evaluations < budget) {
        const std::size_t count = std::min(opt.lambda, budget - result.log.evaluations);
        std::vector<Candidate> children(count);
        for (std::size_t i = 0; i < count; ++i) {
            const auto& parent = population[i % population.size()];
            children[i].x.resize(n);
            for (std::size_t j = 0; j < n; ++j) {
                const auto& d = space.dims[j];
                const double step = sigma * (d.upper - d.lower) * detail::normal(rng);
                children[i].x[j] = std::clamp(parent.x[j] + step, d.lower, d.upper);
            }
        }
        if (!evaluate(children)) return abort();

        std::size_t successes = 0;
        for (std::size_t i = 0; i < count; ++i) {
            if (*children[i].fitness > *population[i % population.size()].fitness) ++successes;
        }
        sigma *= static_cast<double>(successes) / static_cast<double>(count) > 0.2 ? 1.22 : 0.82;
        record(children);

        population.insert(population.end(), children.begin(), children.end());
        std::stable_sort(population.begin(), population.end(), detail::better);
        population.resize(opt.mu);
    }
    return result;
}

// Substitutes the candidate's values into a copy of the template recipe.
inline MergeRecipe candidate_to_recipe(const std::vector<double>& x, const MergeRecipe& tmpl, const SearchSpace& space) {
    if (x.size() != space.size()) throw ValidationError("candidate has the wrong number of dims");
    MergeRecipe r = tmpl;
    for (std::size_t j = 0; j < x.size(); ++j) {
        const auto& name = space.dims[j].name;
        std::size_t index = 0;
        if (name == "lambda") {
            r.params.lambda = x[j];
        } else if (name == "density") {
            r.params.density = x[j];
        } else if (name == "drop_prob") {
            r.params.drop_prob = x[j];
        } else if (name == "t") {
            r.params.t = x[j];
        } else if (is_weight_dim(name, &index) && index < r.models.size()) {
            r.models[index].weight = x[j];
        } else {
            throw ValidationError("dim '" + name + "' has no slot in the recipe");
        }
    }
    return r;
}

inline MergeRecipe candidate_to_recipe(const Candidate& c, const MergeRecipe& tmpl, const SearchSpace& space) {
    return candidate_to_recipe(c.x, tmpl, space);
}

// ---------------------------------------------------------------------------
// Subprocess fitness: `command <recipe-path>`, last stdout token is the score.

inline std::optional<double> parse_fitness_output(std::string_view out) {
    const auto end = out.find_last_not_of(" \t\r\n\f\v");
    if (end == std::string_view::npos) return std::nullopt;
    const auto sep = out.find_last_of(" \t\r\n\f\v", end);
    const auto begin = sep == std::string_view::npos ? 0 : sep + 1;
    const std::string token(out.substr(begin, end + 1 - begin));
    char* stop = nullptr;
    const double v = std::strtod(token.c_str(), &stop);
    if (stop != token.c_str() + token.size() || !std::isfinite(v)) return std::nullopt;
    // strtod also takes hex floats and "infinity"; only plain decimals count.
    if (token.find_first_not_of("0123456789+-.eE") != std::string::npos) return std::nullopt;
    return v;
}

inline std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') {
            out += "'\\''";
        } else {
            out += c;
        }
    }
    return out + "'";
}

class SubprocessFitness {
public:
    SubprocessFitness(std::string command, MergeRecipe tmpl, SearchSpace space, std::filesystem::path work_dir)
        : command_(std::move(command)), tmpl_(std::move(tmpl)), space_(std::move(space)), dir_(std::move(work_dir)) {
        std::filesystem::create_directories(dir_);
    }

    std::filesystem::path recipe_path(std::size_t eval_index) const {
        return dir_ / ("candidate_" + std::to_string(eval_index) + ".json");
    }

    double operator()(const std::vector<double>& x, std::size_t eval_index) const {
        auto recipe = candidate_to_recipe(x, tmpl_, space_);
        const auto path = recipe_path(eval_index);
        {
            std::ofstream out(path, std::ios::binary | std::ios::trunc);
            out << serialize_recipe(recipe);
            if (!out) throw IoError("cannot write '" + path.string() + "'");
        }
        const std::string cmd = command_ + " " + shell_quote(path.string());
        FILE* pipe = ::popen(cmd.c_str(), "r");
        if (!pipe) throw IoError("cannot start fitness command");
        std::string output;
        char buf[4096];
        while (std::size_t got = std::fread(buf, 1, sizeof buf, pipe)) output.append(buf, got);
        const int status = ::pclose(pipe);
        if (status != 0) {
            const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
            throw IoError("fitness command exited with status " + std::to_string(code));
        }
        const auto v = parse_fitness_output(output);
        if (!v) throw IoError("fitness command printed no finite decimal");
        return *v;
    }

private:
    std::string command_;
    MergeRecipe tmpl_;
    SearchSpace space_;
    std::filesystem::path dir_;
};

}  // namespace mergeforge
