#pragma once

// Observation CSV: header x1,...,xd,a,y followed by one row per unit.

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ulfs/error.hpp"
#include "ulfs/observation.hpp"

namespace ulfs {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_real(const std::string& s, std::size_t line, const std::string& col) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw InputError("line " + std::to_string(line) + ": column " + col + " is not a finite number ('" + s + "')");
  }
  return v;
}

inline int parse_binary(const std::string& s, std::size_t line, const std::string& col) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw InputError("line " + std::to_string(line) + ": column " + col + " must be 0 or 1 (got '" + s + "')");
}

}  // namespace detail

/// Parses the observation CSV. Errors name the offending file line (the header is line 1).
inline Sample read_sample_csv(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!detail::trim(line).empty()) {
      header = detail::split_csv_line(line);
      break;
    }
  }
  if (header.empty()) throw InputError("input CSV is empty (a header x1..xd,a,y is required)");
  const std::size_t d = header.size() >= 2 ? header.size() - 2 : 0;
  bool ok = d >= 1 && header[d] == "a" && header[d + 1] == "y";
  for (std::size_t k = 0; ok && k < d; ++k) ok = header[k] == "x" + std::to_string(k + 1);
  if (!ok) throw InputError("line " + std::to_string(lineno) + ": header must be x1,...,xd,a,y with d >= 1");

  Sample sample;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw InputError("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                       " fields, found " + std::to_string(cells.size()));
    }
    Observation o;
    o.x.reserve(d);
    for (std::size_t k = 0; k < d; ++k) o.x.push_back(detail::parse_real(cells[k], lineno, header[k]));
    o.a = detail::parse_binary(cells[d], lineno, "a");
    o.y = detail::parse_binary(cells[d + 1], lineno, "y");
    sample.push_back(std::move(o));
  }
  if (sample.empty()) throw InputError("input CSV has a header but no rows");
  return sample;
}

inline Sample read_sample_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open input file '" + path + "'");
  return read_sample_csv(in);
}

inline void write_sample_csv(std::ostream& os, const Sample& sample) {
  if (sample.empty()) throw DomainError("cannot write an empty sample");
  const std::size_t d = sample.front().x.size();
  for (std::size_t k = 0; k < d; ++k) os << "x" << k + 1 << ",";
  os << "a,y\n";
  for (const auto& o : sample) {
    for (double v : o.x) {
      char buf[32];
      const auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
      os << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)) << ",";
    }
    os << o.a << "," << o.y << "\n";
  }
}

}  // namespace ulfs
