#pragma once

// Versioned CSV tables. The first line is "#<schema>", the second the column
// header. Readers check both, so a renamed or reordered column is an error.

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dso::csv {

/// Shortest text that parses back to the same double.
std::string format_number(double x);
double parse_number(std::string_view text);

class Table {
 public:
  Table(std::string schema, std::vector<std::string> columns);

  const std::string& schema() const noexcept { return schema_; }
  const std::vector<std::string>& columns() const noexcept { return columns_; }
  std::size_t size() const noexcept { return rows_.size(); }

  void add_row(std::vector<std::string> cells);
  const std::vector<std::string>& row(std::size_t i) const { return rows_.at(i); }
  std::size_t column_index(std::string_view name) const;
  const std::string& cell(std::size_t row, std::string_view column) const;
  double number(std::size_t row, std::string_view column) const;

  std::string str() const;
  void write(const std::filesystem::path& path) const;

  /// Throws FormatError when the schema line or header differs from the
  /// expectation, or a row has the wrong number of cells.
  static Table read(const std::filesystem::path& path, std::string_view schema,
                    const std::vector<std::string>& columns);

 private:
  std::string schema_;
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace dso::csv
