// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

// mergeforge: validate, merge, evolve, curate, define, judge, report.
// Results go to stdout as one JSON line; diagnostics go to stderr.
// Exit codes: 0 ok, 1 validation, 2 usage, 3 I/O or endpoint failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mergeforge/eval.hpp"
#include "mergeforge/evolve.hpp"
#include "mergeforge/pipeline.hpp"
#include "mergeforge/recipe.hpp"
#include "mergeforge/vocab.hpp"

namespace fs = std::filesystem;
using namespace mergeforge;
using nlohmann::json;

namespace {

constexpr int kValidation = 1;
constexpr int kIo = 3;

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    out.flush();
    if (!out) throw IoError("cannot write '" + path.string() + "'");
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

struct EndpointFlags {
    std::string url;
    std::string model;
    std::string id;
    std::size_t concurrency = 1;
    double timeout = 60;
    int max_tokens = 256;
    double temperature = 0;
    double backoff = 1.0;

    void add(CLI::App* cmd, const std::string& prefix) {
        cmd->add_option("--" + prefix + "endpoint", url, "Chat-completion base URL (POST {url}/chat/completions)")->required();
        cmd->add_option("--" + prefix + "model", model, "Model name sent in requests")->required();
        cmd->add_option("--" + prefix + "id", id, "Id recorded in outputs (default: the model name)");
        cmd->add_option("--concurrency", concurrency, "Maximum requests in flight")->check(CLI::PositiveNumber);
        cmd->add_option("--timeout", timeout, "Per-request timeout in seconds")->check(CLI::PositiveNumber);
        cmd->add_option("--max-tokens", max_tokens, "max_tokens per request");
        cmd->add_option("--temperature", temperature, "Sampling temperature");
        cmd->add_option("--retry-backoff", backoff, "First retry delay in seconds; doubles per retry");
    }

    EndpointConfig config() const {
        EndpointConfig c;
        c.base_url = url;
        c.model_name = model;
        c.api_key = api_key_from_env();
        c.concurrency_limit = concurrency;
        c.timeout_seconds = timeout;
        c.max_tokens = max_tokens;
        c.temperature = temperature;
        c.backoff_seconds = backoff;
        c.validate();
        return c;
    }
    std::string record_id() const { return id.empty() ? model : id; }
};

// --- subcommands

int cmd_validate(const std::string& recipe_path) {
    const auto r = load_recipe(recipe_path);
    const auto diags = validate_recipe(r);
    for (const auto& d : diags) std::cerr << recipe_path << ": " << d << "\n";
    emit({{"recipe", recipe_path}, {"ok", diags.empty()}, {"diagnostics", diags.size()}});
    return diags.empty() ? 0 : kValidation;
}

int cmd_merge(const std::string& recipe_path, std::size_t threads) {
    const auto r = load_recipe(recipe_path);
    const auto diags = validate_recipe(r);
    if (!diags.empty()) {
        for (const auto& d : diags) std::cerr << recipe_path << ": " << d << "\n";
        return kValidation;
    }
    emit(run_recipe(r, threads).to_json());
    return 0;
}

struct EvolveFlags {
    std::string tmpl, space, fitness_cmd, out_dir;
    std::size_t budget = 0, concurrency = 1;
    std::uint64_t seed = 0;
};

int cmd_evolve(const EvolveFlags& f) {
    // Checked before any file is touched so a bad budget is a usage error.
    if (f.budget < 16) throw UsageError("--budget must be at least 16 (one full population)");
    const auto tmpl = load_recipe(f.tmpl);
    const auto space = load_space(f.space);
    candidate_to_recipe(std::vector<double>(space.size(), 0.0), tmpl, space);  // every dim has a slot
    fs::create_directories(f.out_dir);
    SubprocessFitness fitness(f.fitness_cmd, tmpl, space, fs::path(f.out_dir) / "candidates");
    EvolveOptions opt;
    opt.concurrency = f.concurrency;

    auto save = [&](const EvolveResult& res) {
        write_text(fs::path(f.out_dir) / "evolve_log.csv", res.log.to_csv());
        if (res.best.fitness) write_text(fs::path(f.out_dir) / "best.json", serialize_recipe(candidate_to_recipe(res.best, tmpl, space)));
    };
    try {
        const auto res = evolve(space, std::cref(fitness), f.budget, f.seed, opt);
        save(res);
        json x = json::object();
        for (std::size_t j = 0; j < space.size(); ++j) x[space.dims[j].name] = res.best.x[j];
        emit({{"best_fitness", *res.best.fitness},
              {"best", x},
              {"evaluations", res.log.evaluations},
              {"generations", res.log.generations.size()},
              {"best_recipe", (fs::path(f.out_dir) / "best.json").string()},
              {"log", (fs::path(f.out_dir) / "evolve_log.csv").string()}});
        return 0;
    } catch (const EvolveAborted& e) {
        save(e.partial());
        throw;
    }
}

struct CurateFlags {
    std::string terms, corpus, out, translations;
    std::uint64_t max_freq = 1;
};

int cmd_curate(const CurateFlags& f) {
    const auto terms = load_terms_csv(f.terms);
    const auto freq = count_frequencies_file(f.corpus);
    auto kept = curate(terms, freq, f.max_freq);
    std::size_t untranslated = 0;
    if (!f.translations.empty()) {
        auto tr = attach_translations(kept, load_translations_csv(f.translations));
        for (const auto& d : tr.diagnostics) std::cerr << "curate: " << d << "\n";
        untranslated = tr.diagnostics.size();
        kept = std::move(tr.terms);
    }
    write_text(f.out, format_terms_csv(kept));
    emit({{"terms_in", terms.size()},
          {"terms_kept", kept.size()},
          {"corpus_tokens", freq.total_tokens},
          {"untranslated", untranslated},
          {"out", f.out}});
    return 0;
}

int cmd_define(const EndpointFlags& ep, const std::string& terms_path, const std::string& language, bool reference,
               const std::string& out) {
    const auto cfg = ep.config();
    const auto lang = parse_language(language);
    const auto terms = load_terms_csv(terms_path);
    const auto records = generate_definitions(cfg, http_chat(cfg), terms, lang, reference, ep.record_id());
    std::size_t failed = 0;
    for (const auto& r : records) {
        if (!r.ok()) {
            ++failed;
            std::cerr << "define: '" << r.term_en << "' failed: " << r.error << "\n";
        }
    }
    write_text(out, to_jsonl(records));
    emit({{"records", records.size()}, {"failed", failed}, {"model_id", ep.record_id()}, {"out", out}});
    return 0;
}

int cmd_judge(const EndpointFlags& ep, const std::vector<std::string>& definitions, const std::string& references,
              const std::string& out) {
    const auto cfg = ep.config();
    std::map<std::string, DefinitionRecord> refs;
    for (auto& r : parse_definitions_jsonl(detail::read_text_file(references), references)) {
        refs.emplace(r.term_en, std::move(r));
    }
    std::vector<DefinitionRecord> candidates;
    for (const auto& path : definitions) {
        auto recs = parse_definitions_jsonl(detail::read_text_file(path), path);
        candidates.insert(candidates.end(), recs.begin(), recs.end());
    }
    const auto result = judge_definitions(cfg, http_chat(cfg), ep.record_id(), candidates, refs);
    for (const auto& inv : result.invalid) {
        std::cerr << "judge: '" << inv.term_en << "' (" << inv.model_id << ") invalid: " << inv.reason << "\n";
    }
    write_text(out, to_jsonl(result.scores) + to_jsonl(result.invalid));
    emit({{"scored", result.scores.size()}, {"invalid", result.invalid.size()}, {"judge_id", ep.record_id()}, {"out", out}});
    return 0;
}

int cmd_report(const std::vector<std::string>& score_files, const std::string& out, const std::string& hist_dir,
               const std::string& stats_out) {
    std::vector<ScoreRecord> scores;
    std::size_t invalid = 0;
    std::map<std::pair<std::string, std::string>, std::size_t> invalid_by_cell;
    for (const auto& path : score_files) {
        auto r = parse_scores_jsonl(detail::read_text_file(path), path);
        scores.insert(scores.end(), r.scores.begin(), r.scores.end());
        invalid += r.invalid.size();
        for (const auto& inv : r.invalid) ++invalid_by_cell[{inv.model_id, inv.judge_id}];
    }
    const auto entries = stats_by_model(scores);
    write_text(out, report_table(entries));
    std::vector<std::string> hist_files;
    if (!hist_dir.empty()) {
        fs::create_directories(hist_dir);
        for (const auto& e : entries) {
            const auto path = fs::path(hist_dir) / (safe_file_stem(e.model_id) + "__" + safe_file_stem(e.judge_id) + ".csv");
            emit_histogram(e.stats, path);
            hist_files.push_back(path.string());
        }
    }
    if (!stats_out.empty()) {
        std::vector<csv::Row> rows = {{"model_id", "judge_id", "n", "invalid", "median", "mean", "std"}};
        for (const auto& e : entries) {
            const auto it = invalid_by_cell.find({e.model_id, e.judge_id});
            rows.push_back({e.model_id, e.judge_id, std::to_string(e.stats.n),
                            std::to_string(it == invalid_by_cell.end() ? 0 : it->second), format_fixed(e.stats.median, 1),
                            format_fixed(e.stats.mean, 6), format_fixed(e.stats.std, 6)});
        }
        write_text(stats_out, csv::format(rows));
    }
    emit({{"scores", scores.size()}, {"invalid", invalid}, {"rows", entries.size()}, {"out", out}, {"histograms", hist_files}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mergeforge: model merging, hyperparameter search and definition evaluation"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);
    app.set_version_flag("--version", "mergeforge 0.1.0");

    std::string recipe;
    std::size_t threads = 1;
    auto* validate = app.add_subcommand("validate", "Check a merge recipe and its input checkpoints");
    validate->add_option("--recipe", recipe, "Recipe JSON file")->required();

    auto* merge = app.add_subcommand("merge", "Run a merge recipe");
    merge->add_option("--recipe", recipe, "Recipe JSON file")->required();
    merge->add_option("--threads", threads, "Worker threads (output bytes do not depend on it)")->check(CLI::PositiveNumber);

    EvolveFlags ev;
    auto* evolve_cmd = app.add_subcommand("evolve", "Search merge hyperparameters with an evolution strategy");
    evolve_cmd->add_option("--template", ev.tmpl, "Template recipe JSON")->required();
    evolve_cmd->add_option("--space", ev.space, "Search space JSON: {\"dims\":[{\"name\",\"lower\",\"upper\"}]}")->required();
    evolve_cmd->add_option("--budget", ev.budget, "Total fitness evaluations (>= 16)")->required();
    evolve_cmd->add_option("--seed", ev.seed, "Random seed");
    evolve_cmd->add_option("--fitness-cmd", ev.fitness_cmd, "Shell command; receives the candidate recipe path")->required();
    evolve_cmd->add_option("--out-dir", ev.out_dir, "Directory for best.json, evolve_log.csv and candidates/")->required();
    evolve_cmd->add_option("--concurrency", ev.concurrency, "Concurrent fitness evaluations")->check(CLI::PositiveNumber);

    CurateFlags cu;
    auto* curate_cmd = app.add_subcommand("curate", "Keep rare nouns and adjectives from a term list");
    curate_cmd->add_option("--terms", cu.terms, "Term CSV: term_en,pos[,term_ja]")->required();
    curate_cmd->add_option("--corpus", cu.corpus, "Plain-text UTF-8 corpus")->required();
    curate_cmd->add_option("--max-freq", cu.max_freq, "Maximum corpus frequency kept");
    curate_cmd->add_option("--translations", cu.translations, "CSV term_en,term_ja to attach");
    curate_cmd->add_option("--out", cu.out, "Output CSV")->required();

    EndpointFlags def_ep;
    std::string def_terms, def_lang = "en", def_out;
    bool def_reference = false;
    auto* define_cmd = app.add_subcommand("define", "Generate definitions for each term");
    def_ep.add(define_cmd, "");
    define_cmd->add_option("--terms", def_terms, "Term CSV")->required();
    define_cmd->add_option("--language", def_lang, "en or ja")->check(CLI::IsMember({"en", "ja"}));
    define_cmd->add_flag("--reference", def_reference, "Mark records as reference definitions");
    define_cmd->add_option("--out", def_out, "Output JSON-lines file")->required();

    EndpointFlags judge_ep;
    std::vector<std::string> judge_defs;
    std::string judge_refs, judge_out;
    auto* judge_cmd = app.add_subcommand("judge", "Score definitions against references with a judge model");
    judge_ep.add(judge_cmd, "judge-");
    judge_cmd->add_option("--definitions", judge_defs, "Candidate definition JSON-lines files")->required();
    judge_cmd->add_option("--references", judge_refs, "Reference definition JSON-lines file")->required();
    judge_cmd->add_option("--out", judge_out, "Output JSON-lines file")->required();

    std::vector<std::string> rep_scores;
    std::string rep_out, rep_hist, rep_stats;
    auto* report_cmd = app.add_subcommand("report", "Summarise scores as a Markdown table and histograms");
    report_cmd->add_option("--scores", rep_scores, "Score JSON-lines files")->required();
    report_cmd->add_option("--out", rep_out, "Markdown output")->required();
    report_cmd->add_option("--hist-dir", rep_hist, "Directory for <model>__<judge>.csv histograms");
    report_cmd->add_option("--stats-out", rep_stats, "CSV of n, invalid, median, mean, std per cell");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (*validate) return cmd_validate(recipe);
        if (*merge) return cmd_merge(recipe, threads);
        if (*evolve_cmd) return cmd_evolve(ev);
        if (*curate_cmd) return cmd_curate(cu);
        if (*define_cmd) return cmd_define(def_ep, def_terms, def_lang, def_reference, def_out);
        if (*judge_cmd) return cmd_judge(judge_ep, judge_defs, judge_refs, judge_out);
        if (*report_cmd) return cmd_report(rep_scores, rep_out, rep_hist, rep_stats);
    } catch (const Error& e) {
        std::cerr << "mergeforge: " << e.what() << "\n";
        switch (e.kind()) {
            case Error::Kind::validation: return kValidation;
            case Error::Kind::usage: return 2;
            default: return kIo;
        }
    } catch (const fs::filesystem_error& e) {
        std::cerr << "mergeforge: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "mergeforge: " << e.what() << "\n";
        return kIo;
    }
    return 2;
}
