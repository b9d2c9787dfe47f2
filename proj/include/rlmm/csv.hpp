#pragma once
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>
#include <rlmm/error.hpp>

namespace rlmm {

// Shortest text that round-trips the double exactly.
inline std::string fmt_double(double v)
{
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

// Header plus rows; every row must have the header's width.
inline std::vector<std::vector<std::string>> read_csv(const std::string& path, std::vector<std::string>* header = nullptr)
{
    std::ifstream in(path);
    if (!in) throw lookup_error("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw schema_error("'" + path + "' is empty");
    const auto head = split_csv_line(line);
    if (header) *header = head;
    std::vector<std::vector<std::string>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto row = split_csv_line(line);
        if (row.size() != head.size())
            throw schema_error("'" + path + "' line " + std::to_string(line_no) + " has " + std::to_string(row.size())
                                   + " fields, expected " + std::to_string(head.size()),
                               {line_no});
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::size_t column(const std::vector<std::string>& header, const std::string& name)
{
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    throw schema_error("missing CSV column '" + name + "'");
}

inline void write_text(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << text;
}

} // namespace rlmm
