// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Corpus frequency counting and rare-term curation.
//
// Tokens are maximal runs of ASCII letters joined by single internal
// hyphens, lowercased. Everything else, including non-ASCII characters,
// separates tokens.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/csv.hpp"
#include "mergeforge/error.hpp"

namespace mergeforge {

enum class Pos { noun, adjective, other };

inline std::string_view pos_name(Pos p) {
    switch (p) {
        case Pos::noun: return "noun";
        case Pos::adjective: return "adjective";
        default: return "other";
    }
}

inline Pos parse_pos(std::string_view s) {
    std::string lower(s);
    for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower == "noun") return Pos::noun;
    if (lower == "adjective") return Pos::adjective;
    return Pos::other;
}

struct TermEntry {
    std::string term_en;
    std::string term_ja;  // empty when no translation is known
    Pos pos = Pos::other;
    std::uint64_t corpus_freq = 0;

    friend bool operator==(const TermEntry&, const TermEntry&) = default;
};

struct FreqMap {
    std::map<std::string, std::uint64_t> counts;
    std::uint64_t total_tokens = 0;

    std::uint64_t count(const std::string& token) const {
        const auto it = counts.find(token);
        return it == counts.end() ? 0 : it->second;
    }
};

// Incremental tokenizer; feed() may be called with arbitrary chunk splits.
class Tokenizer {
public:
    template <typename Emit>
    void feed(std::string_view text, Emit&& emit) {
        for (char ch : text) {
            const auto c = static_cast<unsigned char>(ch);
            const bool letter = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
            if (letter) {
                if (hyphen_) token_ += '-';
                hyphen_ = false;
                token_ += static_cast<char>(c | 0x20);
            } else if (c == '-' && !token_.empty() && !hyphen_) {
                hyphen_ = true;
            } else {
                flush(emit);
            }
        }
    }

    template <typename Emit>
    void flush(Emit&& emit) {
        if (!token_.empty()) emit(token_);
        token_.clear();
        hyphen_ = false;
    }

private:
    std::string token_;
    bool hyphen_ = false;
};

inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    Tokenizer t;
    auto emit = [&](const std::string& tok) { out.push_back(tok); };
    t.feed(text, emit);
    t.flush(emit);
    return out;
}

// Streams the corpus in 1 MiB chunks. Invalid UTF-8 is an error carrying
// the byte offset of the offending chunk's sequence.
inline FreqMap count_frequencies(std::istream& in) {
    FreqMap f;
    Tokenizer t;
    auto emit = [&](const std::string& tok) {
        ++f.counts[tok];
        ++f.total_tokens;
    };
    std::string chunk, carry;
    std::vector<char> buf(1 << 20);
    std::uint64_t offset = 0;
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto got = static_cast<std::size_t>(in.gcount());
        if (got == 0) break;
        chunk = carry;
        chunk.append(buf.data(), got);
        // Hold back a trailing partial sequence for the next chunk.
        std::size_t cut = chunk.size();
        for (std::size_t back = 1; back <= 3 && back <= chunk.size(); ++back) {
            const auto c = static_cast<unsigned char>(chunk[chunk.size() - back]);
            if ((c & 0xc0) == 0x80) continue;
            const std::size_t need = c >= 0xf0 ? 4 : c >= 0xe0 ? 3 : c >= 0xc0 ? 2 : 1;
            if (need > back) cut = chunk.size() - back;
            break;
        }
        carry = chunk.substr(cut);
        chunk.resize(cut);
        if (!valid_utf8(chunk)) throw ValidationError("corpus: invalid UTF-8 near byte " + std::to_string(offset));
        t.feed(chunk, emit);
        offset += chunk.size();
    }
    if (!carry.empty()) throw ValidationError("corpus: truncated UTF-8 sequence at byte " + std::to_string(offset));
    t.flush(emit);
    return f;
}

inline FreqMap count_frequencies(std::string_view text) {
    std::istringstream in{std::string(text)};
    return count_frequencies(in);
}

inline FreqMap count_frequencies_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus '" + path.string() + "'");
    return count_frequencies(in);
}

// Frequency of a term: max over its tokens; 0 if it has none.
inline std::uint64_t term_frequency(std::string_view term, const FreqMap& freq) {
    std::uint64_t best = 0;
    for (const auto& tok : tokenize(term)) best = std::max(best, freq.count(tok));
    return best;
}

inline std::vector<TermEntry> curate(const std::vector<TermEntry>& terms, const FreqMap& freq, std::uint64_t max_freq = 1) {
    std::vector<TermEntry> out;
    for (const auto& t : terms) {
        if (t.pos != Pos::noun && t.pos != Pos::adjective) continue;
        const auto f = term_frequency(t.term_en, freq);
        if (f > max_freq) continue;
        out.push_back(t);
        out.back().corpus_freq = f;
    }
    return out;
}

struct TranslationResult {
    std::vector<TermEntry> terms;
    std::vector<std::string> diagnostics;
};

inline TranslationResult attach_translations(const std::vector<TermEntry>& terms,
                                             const std::map<std::string, std::string>& translations) {
    TranslationResult r;
    r.terms = terms;
    for (auto& t : r.terms) {
        const auto it = translations.find(t.term_en);
        if (it != translations.end() && !it->second.empty()) {
            t.term_ja = it->second;
        } else {
            r.diagnostics.push_back("no translation for '" + t.term_en + "'");
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Term files

namespace detail {

// Whole file as UTF-8 text, without a leading byte-order mark.
inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    if (text.rfind("\xEF\xBB\xBF", 0) == 0) text.erase(0, 3);
    if (!valid_utf8(text)) throw ValidationError(path.string() + ": invalid UTF-8");
    return text;
}

inline std::map<std::string, std::size_t> header_index(const csv::Row& header, const std::string& where) {
    std::map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (!idx.emplace(header[i], i).second) throw ValidationError(where + ": duplicate column '" + header[i] + "'");
    }
    return idx;
}

}  // namespace detail

// Header term_en,pos[,term_ja]; corpus_freq is also accepted so curated
// output can be read back.
inline std::vector<TermEntry> parse_terms_csv(std::string_view text, const std::string& where = "terms") {
    auto rows = csv::parse(text);
    if (rows.empty()) throw ValidationError(where + ": missing header");
    const auto idx = detail::header_index(rows[0], where);
    for (const char* required : {"term_en", "pos"}) {
        if (!idx.count(required)) throw ValidationError(where + ": missing column '" + std::string(required) + "'");
    }
    auto col = [&](const csv::Row& row, const char* name) -> std::optional<std::string> {
        const auto it = idx.find(name);
        if (it == idx.end() || it->second >= row.size()) return std::nullopt;
        return row[it->second];
    };
    std::vector<TermEntry> out;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() == 1 && row[0].empty()) continue;
        if (row.size() != rows[0].size()) {
            throw ValidationError(where + " row " + std::to_string(r + 1) + ": expected " +
                                  std::to_string(rows[0].size()) + " fields");
        }
        TermEntry t;
        t.term_en = *col(row, "term_en");
        if (t.term_en.empty()) throw ValidationError(where + " row " + std::to_string(r + 1) + ": empty term_en");
        t.pos = parse_pos(*col(row, "pos"));
        t.term_ja = col(row, "term_ja").value_or("");
        if (auto f = col(row, "corpus_freq"); f && !f->empty()) {
            try {
                std::size_t used = 0;
                t.corpus_freq = std::stoull(*f, &used);
                if (used != f->size()) throw std::invalid_argument("");
            } catch (const std::exception&) {
                throw ValidationError(where + " row " + std::to_string(r + 1) + ": bad corpus_freq '" + *f + "'");
            }
        }
        out.push_back(std::move(t));
    }
    return out;
}

inline std::vector<TermEntry> load_terms_csv(const std::filesystem::path& path) {
    return parse_terms_csv(detail::read_text_file(path), path.string());
}

inline std::string format_terms_csv(const std::vector<TermEntry>& terms) {
    std::vector<csv::Row> rows = {{"term_en", "term_ja", "pos", "corpus_freq"}};
    for (const auto& t : terms) {
        rows.push_back({t.term_en, t.term_ja, std::string(pos_name(t.pos)), std::to_string(t.corpus_freq)});
    }
    return csv::format(rows);
}

// Translation table: CSV with columns term_en,term_ja.
inline std::map<std::string, std::string> load_translations_csv(const std::filesystem::path& path) {
    const auto rows = csv::parse(detail::read_text_file(path));
    if (rows.empty()) throw ValidationError(path.string() + ": missing header");
    const auto idx = detail::header_index(rows[0], path.string());
    if (!idx.count("term_en") || !idx.count("term_ja")) {
        throw ValidationError(path.string() + ": needs columns term_en and term_ja");
    }
    std::map<std::string, std::string> out;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) continue;
        out[rows[r][idx.at("term_en")]] = rows[r][idx.at("term_ja")];
    }
    return out;
}

}  // namespace mergeforge
