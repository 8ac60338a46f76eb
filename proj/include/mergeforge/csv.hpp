// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Minimal RFC 4180 CSV: quoted fields, doubled quotes, CRLF or LF rows.

#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/error.hpp"

namespace mergeforge::csv {

using Row = std::vector<std::string>;

inline std::vector<Row> parse(std::string_view text) {
    std::vector<Row> rows;
    Row row;
    std::string field;
    bool quoted = false, field_started = false;
    std::size_t line = 1;
    auto end_field = [&] {
        row.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_row = [&] {
        end_field();
        rows.push_back(std::move(row));
        row.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        switch (c) {
            case '"':
                if (field_started) throw ValidationError("csv line " + std::to_string(line) + ": stray quote");
                quoted = field_started = true;
                break;
            case ',':
                end_field();
                break;
            case '\r':
                if (i + 1 < text.size() && text[i + 1] == '\n') break;
                field += c;
                field_started = true;
                break;
            case '\n':
                end_row();
                ++line;
                break;
            default:
                field += c;
                field_started = true;
        }
    }
    if (quoted) throw ValidationError("csv line " + std::to_string(line) + ": unterminated quote");
    if (field_started || !row.empty()) end_row();
    return rows;
}

inline std::string escape(std::string_view field) {
    if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string format(const std::vector<Row>& rows) {
    std::string out;
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out += ',';
            out += escape(row[i]);
        }
        out += '\n';
    }
    return out;
}

}  // namespace mergeforge::csv
