#include "simlab/report/csv.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "simlab/error.hpp"

namespace simlab::report {

std::string fmt(double value) {
  if (std::isnan(value)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", value);
  // Avoid "-0.000000" so equal tables stay byte-identical.
  if (std::string_view(buf) == "-0.000000") return "0.000000";
  return buf;
}

namespace {

std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {
  if (header_.empty()) throw PreconditionError("CSV table needs at least one column");
}

void CsvTable::add(std::vector<std::string> row) {
  if (row.size() != header_.size()) {
    throw PreconditionError("CSV row has " + std::to_string(row.size()) + " fields, header has " +
                            std::to_string(header_.size()));
  }
  rows_.push_back(std::move(row));
}

void CsvTable::sort_by(std::size_t key_columns) {
  key_columns = std::min(key_columns, header_.size());
  std::ranges::stable_sort(rows_, [&](const auto& a, const auto& b) {
    return std::lexicographical_compare(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(key_columns),
                                        b.begin(), b.begin() + static_cast<std::ptrdiff_t>(key_columns));
  });
}

std::string CsvTable::text() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + quote(r[i]);
    out += "\n";
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text();
}

CsvTable parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    any = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (quoted) throw FormatError("CSV ends inside a quoted field");
  if (any) {
    row.push_back(std::move(field));
    records.push_back(std::move(row));
  }
  if (records.empty()) throw FormatError("CSV has no header");
  CsvTable table(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) table.add(std::move(records[r]));
  return table;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_csv(text);
}

}  // namespace simlab::report
