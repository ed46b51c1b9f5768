#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "circuitscope/table.hpp"

namespace circuitscope {

struct BandSpec {
  std::string lower;
  std::string upper;
};

struct ChartSpec {
  std::filesystem::path input;
  std::string x;
  std::vector<std::string> series;
  std::vector<BandSpec> bands;
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  std::filesystem::path output;
};

// Throws ConfigError naming the first referenced column absent from the
// header.
void validate_chart(const Table& table, const ChartSpec& spec);

// Standalone SVG 1.1 line chart: one polyline per series, a translucent
// polygon per band, axes with ticks, and a legend. Empty cells and "nan"
// leave gaps; any other non-numeric cell is a DataError naming its row. With
// log_x, rows whose x is not positive are skipped.
std::string render_chart(const Table& table, const ChartSpec& spec);

// Reads spec.input, renders, writes spec.output.
void render_chart_file(const ChartSpec& spec);

}  // namespace circuitscope
