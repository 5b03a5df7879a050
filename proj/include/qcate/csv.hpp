#pragma once

#include <string>
#include <vector>

namespace qcate::csv {

// Minimal comma-separated format: header row, UTF-8, no quoting, no
// embedded commas, missing cells forbidden.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t n_rows() const { return rows.size(); }
    std::size_t n_cols() const { return header.size(); }
    // Column index by name; -1 if absent.
    long find(const std::string& name) const;
};

Table read_file(const std::string& path);
Table read_string(const std::string& text, const std::string& origin = "<string>");

void write_file(const std::string& path, const Table& table);

// Fixed "%.17g" rendering so emitted datasets are byte-reproducible.
std::string format_double(double v);

}  // namespace qcate::csv
