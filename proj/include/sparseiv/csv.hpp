#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sparseiv/errors.hpp"

namespace sparseiv {

/// Strict numeric CSV: comma separated, required header row, '.' decimal,
/// UTF-8, no quoting, no missing values.
struct CsvTable {
  std::vector<std::string> header;
  Eigen::MatrixXd values;  // rows x columns

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  }
};

namespace detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t')) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

inline CsvTable parse_csv(std::istream& in, const std::string& origin = "<stream>") {
  CsvTable table;
  std::string line;
  long line_no = 0;
  if (!std::getline(in, line)) {
    throw ValidationError(origin + ": empty file, expected a header row");
  }
  ++line_no;
  for (auto& name : detail::split_line(line)) {
    const std::string t = detail::trim(name);
    if (t.empty())
      throw ValidationError(origin + ":1: empty column name in header");
    table.header.push_back(t);
  }
  const std::size_t ncol = table.header.size();

  std::vector<double> data;
  long nrow = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() && in.eof()) break;
    const auto cells = detail::split_line(line);
    if (cells.size() != ncol) {
      throw ValidationError(origin + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(ncol) + " fields, found " +
                            std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < ncol; ++c) {
      const std::string cell = detail::trim(cells[c]);
      if (cell.empty()) {
        throw ValidationError(origin + ":" + std::to_string(line_no) +
                              ": missing value in column '" + table.header[c] + "'");
      }
      double v = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        throw ValidationError(origin + ":" + std::to_string(line_no) +
                              ": cannot parse '" + cell + "' in column '" +
                              table.header[c] + "'");
      }
      data.push_back(v);
    }
    ++nrow;
  }
  table.values.resize(nrow, static_cast<Eigen::Index>(ncol));
  for (long r = 0; r < nrow; ++r) {
    for (std::size_t c = 0; c < ncol; ++c) {
      table.values(r, static_cast<Eigen::Index>(c)) = data[static_cast<std::size_t>(r) * ncol + c];
    }
  }
  return table;
}

inline CsvTable parse_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open CSV file: " + path);
  return parse_csv(in, path);
}

}  // namespace sparseiv
