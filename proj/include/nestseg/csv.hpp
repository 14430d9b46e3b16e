#pragma once

#include <cmath>
#include <cstdio>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nestseg/error.hpp"

namespace nestseg::csv {

// Round-trippable text for a double; undefined values print as NA.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Compact text for identifiers and log lines (6 significant digits).
inline std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::string fmt(const std::optional<double>& v) {
  return v ? fmt(*v) : std::string("NA");
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::optional<double> parse_opt(const std::string& s) {
  if (s == "NA") return std::nullopt;
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw DataError("csv: trailing characters in '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw DataError("csv: not a number: '" + s + "'");
  }
}

inline double parse(const std::string& s) {
  auto v = parse_opt(s);
  if (!v) throw DataError("csv: unexpected NA");
  return *v;
}

inline long long parse_int(const std::string& s) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw DataError("csv: trailing characters in '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw DataError("csv: not an integer: '" + s + "'");
  }
}

/// Reads a CSV with a required header; returns the data rows. Every row must
/// have as many cells as the header.
inline std::vector<std::vector<std::string>> read(std::istream& in,
                                                  const std::string& expected_header) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("csv: missing header");
  if (line != expected_header)
    throw DataError("csv: header '" + line + "' != '" + expected_header + "'");
  const auto ncol = split(expected_header).size();
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != ncol) throw DataError("csv: wrong cell count in '" + line + "'");
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace nestseg::csv
