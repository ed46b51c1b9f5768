#include "circuitscope/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>

#include "circuitscope/error.hpp"

namespace circuitscope {

namespace {

constexpr double kWidth = 720, kHeight = 420;
constexpr double kLeft = 70, kRight = 550, kTop = 40, kBottom = 370;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  std::string s = buf;
  if (s == "-0.00") s = "0.00";
  return s;
}

std::string tick_label(double v) {
  if (std::abs(v) < 1e-12) return "0";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

// NaN marks a gap.
double cell_value(const std::string& cell, std::size_t row, const std::string& column) {
  if (cell.empty() || cell == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0;
  auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || p != cell.data() + cell.size()) {
    throw DataError("row " + std::to_string(row) + ", column '" + column + "': '" + cell + "' is not numeric");
  }
  return v;
}

std::vector<double> nice_ticks(double lo, double hi) {
  const double raw = (hi - lo) / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  std::vector<double> out;
  for (double t = std::ceil(lo / step - 1e-9) * step; t <= hi + step * 1e-9; t += step) out.push_back(t);
  return out;
}

struct Axis {
  double lo = 0, hi = 1;
  bool log = false;
  double a0 = 0, a1 = 1;  // pixel range

  double map(double v) const {
    const double t = log ? (std::log10(v) - std::log10(lo)) / (std::log10(hi) - std::log10(lo)) : (v - lo) / (hi - lo);
    return a0 + t * (a1 - a0);
  }
};

void pad_range(double& lo, double& hi, bool log) {
  if (lo < hi) return;
  if (log) {
    lo /= 10.0;
    hi *= 10.0;
  } else {
    lo -= 1.0;
    hi += 1.0;
  }
}

}  // namespace

void validate_chart(const Table& table, const ChartSpec& spec) {
  std::vector<std::string> needed{spec.x};
  needed.insert(needed.end(), spec.series.begin(), spec.series.end());
  for (const auto& b : spec.bands) {
    needed.push_back(b.lower);
    needed.push_back(b.upper);
  }
  for (const auto& c : needed) {
    if (table.column(c) < 0) throw ConfigError("column '" + c + "' is not in the table header");
  }
}

std::string render_chart(const Table& table, const ChartSpec& spec) {
  validate_chart(table, spec);
  const std::size_t n = table.rows.size();
  auto column_values = [&](const std::string& name) {
    const auto c = static_cast<std::size_t>(table.column(name));
    std::vector<double> out(n);
    for (std::size_t r = 0; r < n; ++r) out[r] = cell_value(table.rows[r][c], r + 1, name);
    return out;
  };
  std::vector<double> xs = column_values(spec.x);
  if (spec.log_x) {
    for (auto& x : xs)
      if (!(x > 0)) x = std::numeric_limits<double>::quiet_NaN();
  }
  std::vector<std::vector<double>> ys;
  for (const auto& s : spec.series) ys.push_back(column_values(s));
  std::vector<std::pair<std::vector<double>, std::vector<double>>> bands;
  for (const auto& b : spec.bands) bands.emplace_back(column_values(b.lower), column_values(b.upper));

  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  auto take_y = [&](double x, double y) {
    if (!std::isfinite(x) || !std::isfinite(y)) return;
    xlo = std::min(xlo, x);
    xhi = std::max(xhi, x);
    ylo = std::min(ylo, y);
    yhi = std::max(yhi, y);
  };
  for (std::size_t r = 0; r < n; ++r) {
    for (const auto& y : ys) take_y(xs[r], y[r]);
    for (const auto& [lo, hi] : bands) {
      if (std::isfinite(lo[r]) && std::isfinite(hi[r])) {
        take_y(xs[r], lo[r]);
        take_y(xs[r], hi[r]);
      }
    }
  }
  const bool empty = !std::isfinite(xlo);

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + fixed(kWidth) + "\" height=\"" +
         fixed(kHeight) + "\" viewBox=\"0 0 720 420\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"720\" height=\"420\" fill=\"white\"/>\n";
  if (!spec.title.empty()) {
    svg += "<text x=\"" + fixed((kLeft + kRight) / 2) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"15\">" + escape(spec.title) + "</text>\n";
  }
  svg += "<g id=\"axes\" stroke=\"black\" stroke-width=\"1\">\n";
  svg += "<line x1=\"" + fixed(kLeft) + "\" y1=\"" + fixed(kBottom) + "\" x2=\"" + fixed(kRight) + "\" y2=\"" +
         fixed(kBottom) + "\"/>\n";
  svg += "<line x1=\"" + fixed(kLeft) + "\" y1=\"" + fixed(kTop) + "\" x2=\"" + fixed(kLeft) + "\" y2=\"" +
         fixed(kBottom) + "\"/>\n";
  svg += "</g>\n";
  const std::string text_style = "font-family=\"sans-serif\" font-size=\"12\"";
  svg += "<text x=\"" + fixed((kLeft + kRight) / 2) + "\" y=\"" + fixed(kBottom + 40) + "\" text-anchor=\"middle\" " +
         text_style + ">" + escape(spec.x_label.empty() ? spec.x : spec.x_label) + "</text>\n";
  svg += "<text x=\"18\" y=\"" + fixed((kTop + kBottom) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " +
         fixed((kTop + kBottom) / 2) + ")\" " + text_style + ">" + escape(spec.y_label) + "</text>\n";

  if (empty) {
    svg += "<text x=\"" + fixed((kLeft + kRight) / 2) + "\" y=\"" + fixed((kTop + kBottom) / 2) +
           "\" text-anchor=\"middle\" " + text_style + ">no data</text>\n";
    svg += "</svg>\n";
    return svg;
  }

  Axis ax{xlo, xhi, spec.log_x, kLeft, kRight};
  pad_range(ax.lo, ax.hi, ax.log);
  Axis ay{ylo, yhi, false, kBottom, kTop};
  pad_range(ay.lo, ay.hi, false);

  std::vector<double> xticks;
  if (ax.log) {
    for (double e = std::ceil(std::log10(ax.lo) - 1e-9); e <= std::floor(std::log10(ax.hi) + 1e-9); e += 1.0) {
      xticks.push_back(std::pow(10.0, e));
    }
  } else {
    xticks = nice_ticks(ax.lo, ax.hi);
  }
  svg += "<g id=\"ticks\" stroke=\"black\" stroke-width=\"1\">\n";
  for (double t : xticks) {
    const double px = ax.map(t);
    svg += "<line x1=\"" + fixed(px) + "\" y1=\"" + fixed(kBottom) + "\" x2=\"" + fixed(px) + "\" y2=\"" +
           fixed(kBottom + 5) + "\"/>\n";
  }
  const auto yticks = nice_ticks(ay.lo, ay.hi);
  for (double t : yticks) {
    const double py = ay.map(t);
    svg += "<line x1=\"" + fixed(kLeft - 5) + "\" y1=\"" + fixed(py) + "\" x2=\"" + fixed(kLeft) + "\" y2=\"" +
           fixed(py) + "\"/>\n";
  }
  svg += "</g>\n<g id=\"tick-labels\" " + text_style + ">\n";
  for (double t : xticks) {
    svg += "<text x=\"" + fixed(ax.map(t)) + "\" y=\"" + fixed(kBottom + 18) + "\" text-anchor=\"middle\">" +
           tick_label(t) + "</text>\n";
  }
  for (double t : yticks) {
    svg += "<text x=\"" + fixed(kLeft - 8) + "\" y=\"" + fixed(ay.map(t) + 4) + "\" text-anchor=\"end\">" +
           tick_label(t) + "</text>\n";
  }
  svg += "</g>\n";

  // Runs of consecutive drawable rows.
  auto runs = [&](auto drawable) {
    std::vector<std::vector<std::size_t>> out;
    std::vector<std::size_t> cur;
    for (std::size_t r = 0; r < n; ++r) {
      if (drawable(r)) {
        cur.push_back(r);
      } else if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  };

  for (std::size_t b = 0; b < bands.size(); ++b) {
    const auto& [lo, hi] = bands[b];
    const char* color = kPalette[b % std::size(kPalette)];
    for (const auto& run : runs([&](std::size_t r) { return std::isfinite(xs[r]) && std::isfinite(lo[r]) && std::isfinite(hi[r]); })) {
      std::string pts;
      for (std::size_t r : run) pts += (pts.empty() ? "" : " ") + fixed(ax.map(xs[r])) + "," + fixed(ay.map(hi[r]));
      for (auto it = run.rbegin(); it != run.rend(); ++it) pts += " " + fixed(ax.map(xs[*it])) + "," + fixed(ay.map(lo[*it]));
      svg += "<polygon class=\"band\" fill=\"" + std::string(color) + "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"" +
             pts + "\"/>\n";
    }
  }
  for (std::size_t s = 0; s < ys.size(); ++s) {
    const auto& y = ys[s];
    const char* color = kPalette[s % std::size(kPalette)];
    for (const auto& run : runs([&](std::size_t r) { return std::isfinite(xs[r]) && std::isfinite(y[r]); })) {
      std::string pts;
      for (std::size_t r : run) pts += (pts.empty() ? "" : " ") + fixed(ax.map(xs[r])) + "," + fixed(ay.map(y[r]));
      svg += "<polyline class=\"series\" fill=\"none\" stroke=\"" + std::string(color) +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    }
  }

  svg += "<g id=\"legend\" " + text_style + ">\n";
  double ly = kTop + 10;
  for (std::size_t s = 0; s < spec.series.size(); ++s, ly += 18) {
    const char* color = kPalette[s % std::size(kPalette)];
    svg += "<line x1=\"" + fixed(kRight + 15) + "\" y1=\"" + fixed(ly) + "\" x2=\"" + fixed(kRight + 35) + "\" y2=\"" +
           fixed(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + fixed(kRight + 40) + "\" y=\"" + fixed(ly + 4) + "\">" + escape(spec.series[s]) + "</text>\n";
  }
  for (std::size_t b = 0; b < spec.bands.size(); ++b, ly += 18) {
    const char* color = kPalette[b % std::size(kPalette)];
    svg += "<rect x=\"" + fixed(kRight + 15) + "\" y=\"" + fixed(ly - 5) + "\" width=\"20\" height=\"10\" fill=\"" + color +
           "\" fill-opacity=\"0.2\"/>\n";
    svg += "<text x=\"" + fixed(kRight + 40) + "\" y=\"" + fixed(ly + 4) + "\">" +
           escape(spec.bands[b].lower + " / " + spec.bands[b].upper) + "</text>\n";
  }
  svg += "</g>\n</svg>\n";
  return svg;
}

void render_chart_file(const ChartSpec& spec) {
  const Table table = read_csv(spec.input);
  write_text(spec.output, render_chart(table, spec));
}

}  // namespace circuitscope
