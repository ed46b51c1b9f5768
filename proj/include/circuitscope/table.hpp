#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace circuitscope {

// Shortest round-trippable decimal for a double ("%.17g" trimmed to the
// fewest digits that parse back exactly); "nan", "inf", "-inf" for
// non-finite values and "0" for negative zero.
std::string format_number(double v);

// A CSV table with a header row. Cells are unquoted; LF line endings.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of a header column or -1.
  int column(const std::string& name) const;
  void add_row(std::vector<std::string> row);
  std::string to_csv() const;
  static Table parse(const std::string& text, const std::string& source = "<table>");
};

Table read_csv(const std::filesystem::path& path);
void write_csv(const Table& table, const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace circuitscope
