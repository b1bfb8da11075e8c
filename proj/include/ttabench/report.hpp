#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ttb {

// Deterministic SVG emission: fixed float formatting, stable element order,
// so regenerating from unchanged inputs is byte-identical.

struct SeriesPoint {
  double x = 0.0;
  double y = 0.0;          // median
  double y_min = 0.0;
  double y_max = 0.0;
};

struct ChartSeries {
  std::string label;
  std::vector<SeriesPoint> points;  // sorted by x
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log2_x = false;
  std::vector<double> x_ticks;  // explicit ticks (e.g. configured sizes)
  std::vector<ChartSeries> series;
};

std::string line_chart_svg(const ChartSpec& spec);

struct Bar {
  std::string label;
  double value = 0.0;
  std::string annotation;
};

std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                          const std::vector<Bar>& bars);

// Builds the per-scenario accuracy charts from JSONL records
// (one series per method, median line, min-max band across seeds).
// Returns chart name -> svg content.
std::map<std::string, std::string> build_report_charts(
    const std::string& records_jsonl_text);

}  // namespace ttb
