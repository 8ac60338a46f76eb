// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Definition generation, LLM judging, score statistics and reports.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mergeforge/chat.hpp"
#include "mergeforge/error.hpp"
#include "mergeforge/parallel.hpp"
#include "mergeforge/vocab.hpp"

namespace mergeforge {

enum class Language { en, ja };

inline std::string_view language_name(Language l) { return l == Language::en ? "en" : "ja"; }

inline Language parse_language(std::string_view s) {
    if (s == "en") return Language::en;
    if (s == "ja") return Language::ja;
    throw ValidationError("unknown language '" + std::string(s) + "' (expected en or ja)");
}

struct DefinitionRecord {
    std::string term_en;
    std::string term_ja;
    std::string model_id;
    Language language = Language::en;
    std::string definition;
    bool is_reference = false;
    std::string error;  // set when generation failed; definition is then empty

    bool ok() const { return error.empty(); }
    friend bool operator==(const DefinitionRecord&, const DefinitionRecord&) = default;
};

struct ScoreRecord {
    std::string term_en;
    std::string model_id;
    std::string judge_id;
    int score = 0;
    std::string raw_judge_output;

    friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

// A judgement that produced no score; kept out of the statistics.
struct InvalidJudgement {
    std::string term_en;
    std::string model_id;
    std::string judge_id;
    std::string reason;
    std::string raw_judge_output;

    friend bool operator==(const InvalidJudgement&, const InvalidJudgement&) = default;
};

struct JudgeResult {
    std::vector<ScoreRecord> scores;
    std::vector<InvalidJudgement> invalid;
};

// ---------------------------------------------------------------------------
// Prompts

inline std::string definition_prompt(const TermEntry& t, Language lang) {
    if (lang == Language::en) return "Define the medical term '" + t.term_en + "'. Provide a concise, accurate definition.";
    return "医学用語「" + t.term_ja + "」の定義を簡潔かつ正確に日本語で説明してください。";
}

inline std::string judge_prompt(const DefinitionRecord& candidate, const DefinitionRecord& reference) {
    return "Evaluate the accuracy of a definition of a medical term.\n"
           "English term: " + candidate.term_en + "\n"
           "Japanese term: " + candidate.term_ja + "\n"
           "Reference definition (English expert):\n" + reference.definition + "\n"
           "Candidate definition:\n" + candidate.definition + "\n"
           "Respond with 'Score: N' where N is an integer from 0 to 10.";
}

// ---------------------------------------------------------------------------
// Generation and judging

inline std::vector<DefinitionRecord> generate_definitions(const EndpointConfig& cfg, const ChatFn& chat,
                                                          const std::vector<TermEntry>& terms, Language lang,
                                                          bool is_reference, const std::string& model_id) {
    if (is_reference && lang != Language::en) throw ValidationError("reference definitions must be English");
    if (lang == Language::ja) {
        for (const auto& t : terms) {
            if (t.term_ja.empty()) throw ValidationError("term '" + t.term_en + "' has no Japanese form");
        }
    }
    return bounded_parallel_map(terms.size(), cfg.concurrency_limit, [&](std::size_t i) {
        DefinitionRecord r{terms[i].term_en, terms[i].term_ja, model_id, lang, "", is_reference, ""};
        try {
            r.definition = chat(definition_prompt(terms[i], lang));
            if (r.definition.empty()) r.error = "empty definition";
        } catch (const std::exception& e) {
            r.error = e.what();
        }
        return r;
    });
}

// The last integer in [0, 10] in the text, preferring ones written as
// "Score: N". Scale denominators ("/10", "out of 10"), decimals and signed
// numbers are never candidates.
inline std::optional<int> parse_score(std::string_view raw) {
    auto lower = [](char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); };
    auto ends_with_ci = [&](std::size_t end, std::string_view word) {
        if (end < word.size()) return false;
        for (std::size_t k = 0; k < word.size(); ++k) {
            if (lower(raw[end - word.size() + k]) != word[k]) return false;
        }
        return end == word.size() || !std::isalpha(static_cast<unsigned char>(raw[end - word.size() - 1]));
    };
    auto is_digit = [&](std::size_t i) { return i < raw.size() && std::isdigit(static_cast<unsigned char>(raw[i])); };

    std::optional<int> last, last_scored;
    for (std::size_t i = 0; i < raw.size();) {
        if (!is_digit(i)) {
            ++i;
            continue;
        }
        const std::size_t begin = i;
        while (is_digit(i)) ++i;
        const std::size_t end = i;
        // Part of a decimal or a signed number.
        if (end < raw.size() && raw[end] == '.' && is_digit(end + 1)) continue;
        if (begin > 0 && raw[begin - 1] == '.' && begin > 1 && is_digit(begin - 2)) continue;
        if (begin > 0 && (raw[begin - 1] == '-' || raw[begin - 1] == '+') &&
            (begin == 1 || !std::isalnum(static_cast<unsigned char>(raw[begin - 2])))) {
            continue;
        }
        // Look back over spaces for a denominator marker or "score:".
        std::size_t p = begin;
        while (p > 0 && (raw[p - 1] == ' ' || raw[p - 1] == '\t')) --p;
        if (p > 0 && raw[p - 1] == '/') continue;
        if (ends_with_ci(p, "of")) {
            std::size_t q = p - 2;
            while (q > 0 && (raw[q - 1] == ' ' || raw[q - 1] == '\t')) --q;
            if (ends_with_ci(q, "out")) continue;
        }
        if (end - begin > 2) continue;
        const int v = std::stoi(std::string(raw.substr(begin, end - begin)));
        if (v > 10) continue;
        last = v;
        std::size_t q = begin;
        while (q > 0 && (raw[q - 1] == ' ' || raw[q - 1] == '*')) --q;
        if (q > 0 && raw[q - 1] == ':') {
            --q;
            while (q > 0 && (raw[q - 1] == ' ' || raw[q - 1] == '*')) --q;
            if (ends_with_ci(q, "score")) last_scored = v;
        }
    }
    return last_scored ? last_scored : last;
}

// Scores every candidate; a reply without a parseable score is re-asked up
// to `reasks` times. Failed candidates and endpoint failures become
// InvalidJudgement entries, in candidate order.
inline JudgeResult judge_definitions(const EndpointConfig& cfg, const ChatFn& chat, const std::string& judge_id,
                                     const std::vector<DefinitionRecord>& candidates,
                                     const std::map<std::string, DefinitionRecord>& references, std::size_t reasks = 3) {
    for (const auto& c : candidates) {
        if (!references.count(c.term_en)) throw ValidationError("no reference definition for '" + c.term_en + "'");
    }
    struct Outcome {
        std::optional<ScoreRecord> score;
        InvalidJudgement invalid;
    };
    auto outcomes = bounded_parallel_map(candidates.size(), cfg.concurrency_limit, [&](std::size_t i) {
        const auto& c = candidates[i];
        Outcome o;
        o.invalid = {c.term_en, c.model_id, judge_id, "", ""};
        const auto& ref = references.at(c.term_en);
        if (!c.ok()) {
            o.invalid.reason = "candidate generation failed: " + c.error;
            return o;
        }
        if (!ref.ok()) {
            o.invalid.reason = "reference generation failed: " + ref.error;
            return o;
        }
        const auto prompt = judge_prompt(c, ref);
        for (std::size_t attempt = 0; attempt <= reasks; ++attempt) {
            try {
                o.invalid.raw_judge_output = chat(prompt);
            } catch (const std::exception& e) {
                o.invalid.reason = e.what();
                return o;
            }
            if (auto s = parse_score(o.invalid.raw_judge_output)) {
                o.score = ScoreRecord{c.term_en, c.model_id, judge_id, *s, o.invalid.raw_judge_output};
                return o;
            }
        }
        o.invalid.reason = "no score in judge output";
        return o;
    });
    JudgeResult r;
    for (auto& o : outcomes) {
        if (o.score) {
            r.scores.push_back(std::move(*o.score));
        } else {
            r.invalid.push_back(std::move(o.invalid));
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Statistics

struct ScoreStats {
    double median = 0;
    double mean = 0;
    double std = 0;  // population
    std::size_t n = 0;
    std::array<std::size_t, 11> histogram{};
};

inline ScoreStats compute_stats(const std::vector<int>& scores) {
    if (scores.empty()) throw ValidationError("no scores");
    ScoreStats s;
    s.n = scores.size();
    for (int v : scores) {
        if (v < 0 || v > 10) throw ValidationError("score " + std::to_string(v) + " is outside 0..10");
        ++s.histogram[static_cast<std::size_t>(v)];
    }
    // The histogram is a counting sort, so order statistics come from it.
    auto kth = [&](std::size_t k) {
        for (std::size_t b = 0, seen = 0; b < 11; ++b) {
            seen += s.histogram[b];
            if (k < seen) return static_cast<double>(b);
        }
        return 10.0;
    };
    s.median = s.n % 2 ? kth(s.n / 2) : (kth(s.n / 2 - 1) + kth(s.n / 2)) / 2;
    double sum = 0;
    for (std::size_t b = 0; b < 11; ++b) sum += static_cast<double>(b) * static_cast<double>(s.histogram[b]);
    s.mean = sum / static_cast<double>(s.n);
    double ss = 0;
    for (std::size_t b = 0; b < 11; ++b) {
        const double d = static_cast<double>(b) - s.mean;
        ss += d * d * static_cast<double>(s.histogram[b]);
    }
    s.std = std::sqrt(ss / static_cast<double>(s.n));
    return s;
}

// One (model, judge) cell of the report, in presentation order.
struct StatsEntry {
    std::string model_id;
    std::string judge_id;
    ScoreStats stats;
};

inline std::string format_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

// One decimal, except that 10 is printed bare.
inline std::string format_median(double v) {
    const auto s = format_fixed(v, 1);
    return s == "10.0" ? "10" : s;
}

// Markdown table: one row per model, Median/Mean/Std per judge. Models and
// judges appear in first-seen order; a missing cell renders as "-".
inline std::string report_table(const std::vector<StatsEntry>& entries) {
    std::vector<std::string> models, judges;
    std::map<std::pair<std::string, std::string>, const ScoreStats*> cell;
    for (const auto& e : entries) {
        if (std::find(models.begin(), models.end(), e.model_id) == models.end()) models.push_back(e.model_id);
        if (std::find(judges.begin(), judges.end(), e.judge_id) == judges.end()) judges.push_back(e.judge_id);
        cell[{e.model_id, e.judge_id}] = &e.stats;
    }
    std::string out = "| Model |";
    for (const auto& j : judges) out += " " + j + " Median | " + j + " Mean | " + j + " Std |";
    out += "\n|---|";
    for (std::size_t k = 0; k < judges.size(); ++k) out += "---|---|---|";
    out += "\n";
    for (const auto& m : models) {
        out += "| " + m + " |";
        for (const auto& j : judges) {
            const auto it = cell.find({m, j});
            if (it == cell.end()) {
                out += " - | - | - |";
            } else {
                const auto& s = *it->second;
                out += " " + format_median(s.median) + " | " + format_fixed(s.mean, 2) + " | " + format_fixed(s.std, 2) + " |";
            }
        }
        out += "\n";
    }
    return out;
}

inline std::string histogram_csv(const ScoreStats& s) {
    std::string out = "score,count\n";
    for (std::size_t b = 0; b < 11; ++b) out += std::to_string(b) + "," + std::to_string(s.histogram[b]) + "\n";
    return out;
}

inline void emit_histogram(const ScoreStats& s, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << histogram_csv(s);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
}

// File-name-safe form of an id.
inline std::string safe_file_stem(std::string_view id) {
    std::string out;
    for (char c : id) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' ? c : '_';
    return out.empty() ? "_" : out;
}

// Groups valid scores by (model, judge) in first-seen order.
inline std::vector<StatsEntry> stats_by_model(const std::vector<ScoreRecord>& scores) {
    std::vector<std::pair<std::string, std::string>> order;
    std::map<std::pair<std::string, std::string>, std::vector<int>> groups;
    for (const auto& s : scores) {
        auto key = std::make_pair(s.model_id, s.judge_id);
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(s.score);
    }
    std::vector<StatsEntry> out;
    for (const auto& key : order) out.push_back({key.first, key.second, compute_stats(groups[key])});
    return out;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence

inline nlohmann::ordered_json to_json(const DefinitionRecord& r) {
    nlohmann::ordered_json j{{"term_en", r.term_en},   {"term_ja", r.term_ja},
                             {"model_id", r.model_id}, {"language", language_name(r.language)},
                             {"definition", r.definition}, {"is_reference", r.is_reference}};
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

inline nlohmann::ordered_json to_json(const ScoreRecord& r) {
    return {{"term_en", r.term_en}, {"model_id", r.model_id}, {"judge_id", r.judge_id},
            {"score", r.score},     {"raw_judge_output", r.raw_judge_output}};
}

inline nlohmann::ordered_json to_json(const InvalidJudgement& r) {
    return {{"term_en", r.term_en}, {"model_id", r.model_id},       {"judge_id", r.judge_id},
            {"invalid", r.reason},  {"raw_judge_output", r.raw_judge_output}};
}

template <typename Range>
std::string to_jsonl(const Range& records) {
    std::string out;
    for (const auto& r : records) out += to_json(r).dump() + "\n";
    return out;
}

namespace detail {

template <typename F>
void for_each_jsonl(std::string_view text, const std::string& where, F&& f) {
    std::size_t line = 0;
    for (std::size_t pos = 0; pos < text.size();) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        ++line;
        const auto row = text.substr(pos, nl - pos);
        pos = nl + 1;
        if (row.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        try {
            f(nlohmann::json::parse(row));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(where + " line " + std::to_string(line) + ": " + e.what());
        }
    }
}

}  // namespace detail

inline std::vector<DefinitionRecord> parse_definitions_jsonl(std::string_view text, const std::string& where = "definitions") {
    std::vector<DefinitionRecord> out;
    detail::for_each_jsonl(text, where, [&](const nlohmann::json& j) {
        DefinitionRecord r;
        r.term_en = j.at("term_en").get<std::string>();
        r.term_ja = j.value("term_ja", "");
        r.model_id = j.at("model_id").get<std::string>();
        r.language = parse_language(j.at("language").get<std::string>());
        r.definition = j.at("definition").get<std::string>();
        r.is_reference = j.value("is_reference", false);
        r.error = j.value("error", "");
        out.push_back(std::move(r));
    });
    return out;
}

inline JudgeResult parse_scores_jsonl(std::string_view text, const std::string& where = "scores") {
    JudgeResult out;
    detail::for_each_jsonl(text, where, [&](const nlohmann::json& j) {
        if (j.contains("invalid")) {
            out.invalid.push_back({j.at("term_en").get<std::string>(), j.at("model_id").get<std::string>(),
                                   j.at("judge_id").get<std::string>(), j.at("invalid").get<std::string>(),
                                   j.value("raw_judge_output", "")});
            return;
        }
        ScoreRecord r{j.at("term_en").get<std::string>(), j.at("model_id").get<std::string>(),
                      j.at("judge_id").get<std::string>(), j.at("score").get<int>(), j.value("raw_judge_output", "")};
        if (r.score < 0 || r.score > 10) throw ValidationError(where + ": score outside 0..10");
        out.scores.push_back(std::move(r));
    });
    return out;
}

}  // namespace mergeforge
