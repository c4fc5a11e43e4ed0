#pragma once

#include <concepts>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <filesystem>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dynmanip::csv {

// Shortest round-trip decimal, locale independent.
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Try to trim to the shortest representation that round-trips.
  for (int prec = 6; prec < 17; ++prec) {
    char trial[32];
    std::snprintf(trial, sizeof trial, "%.*g", prec, v);
    if (std::strtod(trial, nullptr) == v) return trial;
  }
  return buf;
}

inline std::string num(bool v) { return v ? "true" : "false"; }

template <std::integral T>
  requires(!std::same_as<T, bool>)
std::string num(T v) {
  return std::to_string(v);
}

/// Accumulates rows in memory; written in one shot so partial files never
/// appear on disk.
class Table {
 public:
  explicit Table(std::vector<std::string> header) : header_(std::move(header)) {}

  template <typename... Ts>
  void row(const Ts&... values) {
    std::vector<std::string> cells;
    cells.reserve(sizeof...(Ts));
    (cells.push_back(to_cell(values)), ...);
    if (cells.size() != header_.size())
      throw std::logic_error("csv row width does not match header");
    rows_.push_back(std::move(cells));
  }

  void raw_row(std::vector<std::string> cells) {
    if (cells.size() != header_.size())
      throw std::logic_error("csv row width does not match header");
    rows_.push_back(std::move(cells));
  }

  const std::vector<std::string>& header() const { return header_; }
  std::size_t size() const { return rows_.size(); }

  std::string str() const {
    std::string out;
    append_line(out, header_);
    for (const auto& r : rows_) append_line(out, r);
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f << str();
  }

 private:
  static std::string to_cell(const std::string& s) { return s; }
  static std::string to_cell(const char* s) { return s; }
  static std::string to_cell(std::string_view s) { return std::string(s); }
  template <typename T>
  static std::string to_cell(const T& v) {
    return num(v);
  }

  static void append_line(std::string& out, const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  }

  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Minimal reader for the files this project writes (no quoting).
struct Parsed {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw std::out_of_range("no csv column " + std::string(name));
  }
};

inline Parsed parse(std::string_view text) {
  Parsed p;
  std::istringstream in{std::string(text)};
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (first) {
      p.header = std::move(cells);
      first = false;
    } else {
      if (cells.size() != p.header.size()) throw std::runtime_error("ragged csv row: " + line);
      p.rows.push_back(std::move(cells));
    }
  }
  return p;
}

inline Parsed read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

}  // namespace dynmanip::csv
