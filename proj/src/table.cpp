#include "circuitscope/table.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "circuitscope/error.hpp"

namespace circuitscope {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

int Table::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  return -1;
}

void Table::add_row(std::vector<std::string> row) {
  if (row.size() != header.size()) {
    throw InputError("table row has " + std::to_string(row.size()) + " cells, header has " +
                     std::to_string(header.size()));
  }
  rows.push_back(std::move(row));
}

std::string Table::to_csv() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

Table Table::parse(const std::string& text, const std::string& source) {
  Table t;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw FormatError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                        " cells, found " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

Table read_csv(const std::filesystem::path& path) { return Table::parse(read_text(path), path.string()); }

void write_csv(const Table& table, const std::filesystem::path& path) { write_text(path, table.to_csv()); }

}  // namespace circuitscope
