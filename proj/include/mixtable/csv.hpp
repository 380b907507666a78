#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mixtable/common.hpp"

namespace mixtable {

// RFC-4180 CSV, UTF-8, header row required, empty field = missing.

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

namespace detail {

inline bool csv_needs_quoting(const std::string& field) {
    for (char c : field) {
        if (c == ',' || c == '"' || c == '\n' || c == '\r') return true;
    }
    return false;
}

}  // namespace detail

inline CsvTable parse_csv(const std::string& text, const std::string& origin = "<csv>") {
    CsvTable table;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false;
    bool field_was_quoted = false;
    bool any_field = false;

    auto end_field = [&] {
        record.push_back(field);
        field.clear();
        field_was_quoted = false;
        any_field = true;
    };
    auto end_record = [&] {
        end_field();
        if (table.header.empty()) {
            table.header = record;
        } else {
            if (record.size() != table.header.size()) {
                throw DataError(concat(origin, ": row ", table.rows.size() + 1, " has ",
                                       record.size(), " fields, header has ", table.header.size()));
            }
            table.rows.push_back(record);
        }
        record.clear();
        any_field = false;
    };

    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < n && text[i + 1] == '"') {
                    field += '"';
                    i += 2;
                } else {
                    in_quotes = false;
                    ++i;
                }
            } else {
                field += c;
                ++i;
            }
        } else {
            if (c == '"' && field.empty() && !field_was_quoted) {
                in_quotes = true;
                field_was_quoted = true;
                ++i;
            } else if (c == ',') {
                end_field();
                ++i;
            } else if (c == '\r') {
                if (i + 1 < n && text[i + 1] == '\n') ++i;
                end_record();
                ++i;
            } else if (c == '\n') {
                end_record();
                ++i;
            } else {
                field += c;
                ++i;
            }
        }
    }
    if (in_quotes) throw DataError(concat(origin, ": unterminated quoted field"));
    if (any_field || !field.empty()) end_record();
    if (table.header.empty()) throw DataError(concat(origin, ": missing header row"));
    return table;
}

inline CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(concat("cannot open csv file: ", path));
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_csv(text, path);
}

inline std::string format_csv_field(const std::string& field) {
    if (!detail::csv_needs_quoting(field)) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

inline std::string write_csv(const CsvTable& table) {
    std::string out;
    auto write_record = [&](const std::vector<std::string>& rec) {
        for (size_t i = 0; i < rec.size(); ++i) {
            if (i > 0) out += ',';
            out += format_csv_field(rec[i]);
        }
        out += '\n';
    };
    write_record(table.header);
    for (const auto& row : table.rows) write_record(row);
    return out;
}

// 9 significant digits, enough to round-trip the values we store
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

}  // namespace mixtable
