#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace simlab::report {

/// Fixed-precision decimal used in every table ("%.6f").
std::string fmt(double value);

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  void add(std::vector<std::string> row);
  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  /// Sorts rows lexicographically on the given leading key columns
  /// (stable, so equal keys keep insertion order).
  void sort_by(std::size_t key_columns);

  std::string text() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// RFC 4180 parsing of a table written by CsvTable (header row first).
CsvTable read_csv(const std::filesystem::path& path);
CsvTable parse_csv(std::string_view text);

}  // namespace simlab::report
