#include "dso/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dso/errors.hpp"

namespace dso::csv {

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  if (ec != std::errc{}) throw FormatError("format_number: conversion failed");
  return std::string(buf, end);
}

double parse_number(std::string_view text) {
  if (text == "nan") return std::nan("");
  if (text == "inf") return INFINITY;
  if (text == "-inf") return -INFINITY;
  double x = 0.0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), x);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    throw FormatError("not a number: '" + std::string(text) + "'");
  }
  return x;
}

Table::Table(std::string schema, std::vector<std::string> columns)
    : schema_(std::move(schema)), columns_(std::move(columns)) {}

void Table::add_row(std::vector<std::string> cells) {
  if (cells.size() != columns_.size()) {
    throw ShapeError("csv: row has " + std::to_string(cells.size()) + " cells, expected " +
                     std::to_string(columns_.size()));
  }
  rows_.push_back(std::move(cells));
}

std::size_t Table::column_index(std::string_view name) const {
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    if (columns_[i] == name) return i;
  }
  throw FormatError("csv " + schema_ + ": no column '" + std::string(name) + "'");
}

const std::string& Table::cell(std::size_t row, std::string_view column) const {
  return rows_.at(row).at(column_index(column));
}

double Table::number(std::size_t row, std::string_view column) const {
  return parse_number(cell(row, column));
}

static std::string join(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out;
}

std::string Table::str() const {
  std::string out = "#" + schema_ + "\n" + join(columns_) + "\n";
  for (const auto& r : rows_) out += join(r) + "\n";
  return out;
}

void Table::write(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << str();
}

static std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

Table Table::read(const std::filesystem::path& path, std::string_view schema,
                  const std::vector<std::string>& columns) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "#" + std::string(schema)) {
    throw FormatError(path.string() + ": expected schema '" + std::string(schema) + "', found '" +
                      line + "'");
  }
  if (!std::getline(f, line) || split(line) != columns) {
    throw FormatError(path.string() + ": header does not match schema " + std::string(schema));
  }
  Table t(std::string(schema), columns);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != columns.size()) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
    t.rows_.push_back(std::move(cells));
  }
  return t;
}

}  // namespace dso::csv
