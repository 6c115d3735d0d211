#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"

namespace pbmeta::csv {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(std::string_view name) const {
        for (size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return static_cast<int>(j);
        return -1;
    }
};

// RFC 4180: quoted fields, doubled quotes, CRLF or LF line ends.
inline Table parse(std::istream& in) {
    Table t;
    std::vector<std::string> record;
    std::string field;
    bool quoted = false, any = false, first = true;
    auto end_record = [&] {
        record.push_back(std::move(field));
        field.clear();
        bool blank = record.size() == 1 && record[0].empty();
        if (!blank) {
            if (first) {
                t.header = std::move(record);
                first = false;
            } else {
                t.rows.push_back(std::move(record));
            }
        }
        record.clear();
        any = false;
    };
    char c;
    while (in.get(c)) {
        if (quoted) {
            if (c == '"') {
                if (in.peek() == '"') {
                    in.get(c);
                    field.push_back('"');
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        any = true;
        if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            record.push_back(std::move(field));
            field.clear();
        } else if (c == '\r') {
            if (in.peek() == '\n') in.get(c);
            end_record();
        } else if (c == '\n') {
            end_record();
        } else {
            field.push_back(c);
        }
    }
    if (quoted) fail(ErrorCode::ParseError, "unterminated quoted field");
    if (any || !field.empty() || !record.empty()) end_record();
    for (size_t i = 0; i < t.rows.size(); ++i)
        if (t.rows[i].size() != t.header.size())
            fail(ErrorCode::ParseError, "row " + std::to_string(i + 1) + " has " +
                                            std::to_string(t.rows[i].size()) + " fields, header has " +
                                            std::to_string(t.header.size()));
    return t;
}

inline Table read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::ParseError, "cannot open " + path);
    return parse(in);
}

inline std::string quote(std::string_view s) {
    if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

// Shortest representation that round-trips exactly.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    if (s.empty()) return false;
    if (s.front() == '+') s.remove_prefix(1);
    auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

inline void write_row(std::ostream& out, const std::vector<std::string>& fields) {
    for (size_t j = 0; j < fields.size(); ++j) {
        if (j) out << ',';
        out << quote(fields[j]);
    }
    out << "\r\n";
}

} // namespace pbmeta::csv
