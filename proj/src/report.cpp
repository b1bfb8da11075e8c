#include "ttabench/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ttabench/eval.hpp"
#include "ttabench/util.hpp"

namespace ttb {

using nlohmann::json;

namespace {

// Stable palette, one color per series in insertion order.
const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string f2(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string fmt_tick(double v) {
  char buf[40];
  if (std::abs(v - std::round(v)) < 1e-9) {
    std::snprintf(buf, sizeof(buf), "%.0f", v);
  } else {
    std::snprintf(buf, sizeof(buf), "%.3g", v);
  }
  return buf;
}

struct Frame {
  double width = 640, height = 420;
  double left = 64, right = 24, top = 40, bottom = 56;
  double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
  bool log2_x = false;

  double tx(double x) const {
    const double v = log2_x ? std::log2(x) : x;
    const double lo = log2_x ? std::log2(x_lo) : x_lo;
    const double hi = log2_x ? std::log2(x_hi) : x_hi;
    const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    return left + t * (width - left - right);
  }

  double ty(double y) const {
    const double t = y_hi > y_lo ? (y - y_lo) / (y_hi - y_lo) : 0.5;
    return height - bottom - t * (height - top - bottom);
  }
};

void open_svg(std::ostringstream& os, double w, double h) {
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
     << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h
     << "\" font-family=\"sans-serif\">\n"
     << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
}

}  // namespace

std::string line_chart_svg(const ChartSpec& spec) {
  Frame fr;
  fr.log2_x = spec.log2_x;
  bool any = false;
  for (const auto& s : spec.series) {
    for (const auto& p : s.points) {
      if (!any) {
        fr.x_lo = fr.x_hi = p.x;
        fr.y_lo = p.y_min;
        fr.y_hi = p.y_max;
        any = true;
      }
      fr.x_lo = std::min(fr.x_lo, p.x);
      fr.x_hi = std::max(fr.x_hi, p.x);
      fr.y_lo = std::min(fr.y_lo, p.y_min);
      fr.y_hi = std::max(fr.y_hi, p.y_max);
    }
  }
  if (!any) {
    fr.x_lo = 1;
    fr.x_hi = 2;
  }
  const double pad = std::max(0.02, (fr.y_hi - fr.y_lo) * 0.08);
  fr.y_lo = std::max(0.0, fr.y_lo - pad);
  fr.y_hi = fr.y_hi + pad;

  std::ostringstream os;
  open_svg(os, fr.width, fr.height);
  os << "<text x=\"" << f2(fr.width / 2) << "\" y=\"22\" font-size=\"15\" "
        "text-anchor=\"middle\">"
     << spec.title << "</text>\n";

  // axes
  os << "<line x1=\"" << f2(fr.left) << "\" y1=\"" << f2(fr.height - fr.bottom)
     << "\" x2=\"" << f2(fr.width - fr.right) << "\" y2=\""
     << f2(fr.height - fr.bottom) << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << f2(fr.left) << "\" y1=\"" << f2(fr.top) << "\" x2=\""
     << f2(fr.left) << "\" y2=\"" << f2(fr.height - fr.bottom)
     << "\" stroke=\"black\"/>\n";

  // x ticks
  std::vector<double> ticks = spec.x_ticks;
  if (ticks.empty()) {
    std::set<double> xs;
    for (const auto& s : spec.series) {
      for (const auto& p : s.points) xs.insert(p.x);
    }
    ticks.assign(xs.begin(), xs.end());
  }
  for (double t : ticks) {
    if (t < fr.x_lo || t > fr.x_hi) continue;
    const double x = fr.tx(t);
    os << "<line x1=\"" << f2(x) << "\" y1=\"" << f2(fr.height - fr.bottom)
       << "\" x2=\"" << f2(x) << "\" y2=\"" << f2(fr.height - fr.bottom + 5)
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << f2(x) << "\" y=\"" << f2(fr.height - fr.bottom + 18)
       << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt_tick(t)
       << "</text>\n";
  }
  // y ticks: 5 even divisions
  for (int i = 0; i <= 5; ++i) {
    const double v = fr.y_lo + (fr.y_hi - fr.y_lo) * i / 5.0;
    const double y = fr.ty(v);
    os << "<line x1=\"" << f2(fr.left - 5) << "\" y1=\"" << f2(y) << "\" x2=\""
       << f2(fr.left) << "\" y2=\"" << f2(y) << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << f2(fr.left - 8) << "\" y=\"" << f2(y + 4)
       << "\" font-size=\"11\" text-anchor=\"end\">" << f2(v) << "</text>\n";
  }
  os << "<text x=\"" << f2((fr.left + fr.width - fr.right) / 2) << "\" y=\""
     << f2(fr.height - 12) << "\" font-size=\"12\" text-anchor=\"middle\">"
     << spec.x_label << "</text>\n";
  os << "<text x=\"16\" y=\"" << f2((fr.top + fr.height - fr.bottom) / 2)
     << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << f2((fr.top + fr.height - fr.bottom) / 2) << ")\">" << spec.y_label
     << "</text>\n";

  // series: min-max band then median line
  int color_idx = 0;
  for (const auto& s : spec.series) {
    const char* color = kPalette[color_idx % 8];
    if (s.points.size() >= 2) {
      std::ostringstream band;
      for (const auto& p : s.points) {
        band << f2(fr.tx(p.x)) << ',' << f2(fr.ty(p.y_max)) << ' ';
      }
      for (auto it = s.points.rbegin(); it != s.points.rend(); ++it) {
        band << f2(fr.tx(it->x)) << ',' << f2(fr.ty(it->y_min)) << ' ';
      }
      os << "<polygon points=\"" << band.str() << "\" fill=\"" << color
         << "\" opacity=\"0.15\" stroke=\"none\"/>\n";
    }
    std::ostringstream line;
    for (const auto& p : s.points) {
      line << f2(fr.tx(p.x)) << ',' << f2(fr.ty(p.y)) << ' ';
    }
    os << "<polyline points=\"" << line.str() << "\" fill=\"none\" stroke=\""
       << color << "\" stroke-width=\"2\"/>\n";
    for (const auto& p : s.points) {
      os << "<circle cx=\"" << f2(fr.tx(p.x)) << "\" cy=\"" << f2(fr.ty(p.y))
         << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    }
    // legend entry
    const double ly = fr.top + 14 * color_idx;
    os << "<line x1=\"" << f2(fr.width - fr.right - 110) << "\" y1=\""
       << f2(ly) << "\" x2=\"" << f2(fr.width - fr.right - 90) << "\" y2=\""
       << f2(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << f2(fr.width - fr.right - 84) << "\" y=\""
       << f2(ly + 4) << "\" font-size=\"11\">" << s.label << "</text>\n";
    ++color_idx;
  }
  os << "</svg>\n";
  return os.str();
}

std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                          const std::vector<Bar>& bars) {
  const double w = 640, h = 420, left = 72, right = 24, top = 48, bottom = 64;
  double v_max = 1e-9;
  for (const auto& b : bars) v_max = std::max(v_max, b.value);
  std::ostringstream os;
  open_svg(os, w, h);
  os << "<text x=\"" << f2(w / 2)
     << "\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">" << title
     << "</text>\n";
  os << "<line x1=\"" << f2(left) << "\" y1=\"" << f2(h - bottom) << "\" x2=\""
     << f2(w - right) << "\" y2=\"" << f2(h - bottom)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << f2(left) << "\" y1=\"" << f2(top) << "\" x2=\""
     << f2(left) << "\" y2=\"" << f2(h - bottom) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = v_max * i / 5.0;
    const double y = h - bottom - (h - top - bottom) * i / 5.0;
    os << "<text x=\"" << f2(left - 8) << "\" y=\"" << f2(y + 4)
       << "\" font-size=\"11\" text-anchor=\"end\">" << f2(v) << "</text>\n";
  }
  os << "<text x=\"16\" y=\"" << f2((top + h - bottom) / 2)
     << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << f2((top + h - bottom) / 2) << ")\">" << y_label << "</text>\n";

  const double span = w - left - right;
  const double slot = bars.empty() ? span : span / static_cast<double>(bars.size());
  const double bar_w = slot * 0.6;
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double x = left + slot * static_cast<double>(i) + (slot - bar_w) / 2;
    const double bh = (h - top - bottom) * bars[i].value / v_max;
    const double y = h - bottom - bh;
    os << "<rect x=\"" << f2(x) << "\" y=\"" << f2(y) << "\" width=\""
       << f2(bar_w) << "\" height=\"" << f2(bh) << "\" fill=\""
       << kPalette[i % 8] << "\"/>\n";
    os << "<text x=\"" << f2(x + bar_w / 2) << "\" y=\"" << f2(h - bottom + 16)
       << "\" font-size=\"12\" text-anchor=\"middle\">" << bars[i].label
       << "</text>\n";
    if (!bars[i].annotation.empty()) {
      os << "<text x=\"" << f2(x + bar_w / 2) << "\" y=\"" << f2(y - 6)
         << "\" font-size=\"11\" text-anchor=\"middle\">" << bars[i].annotation
         << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> build_report_charts(
    const std::string& records_jsonl_text) {
  struct Key {
    std::string scenario;
    std::string method;
    double x;
    bool operator<(const Key& other) const {
      return std::tie(scenario, method, x) <
             std::tie(other.scenario, other.method, other.x);
    }
  };
  std::map<Key, std::vector<double>> groups;
  std::istringstream in(records_jsonl_text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.value("failed", false)) continue;
    if (j["xi_d_t"].is_null()) continue;
    Key k;
    k.scenario = j["scenario"]["id"].get<std::string>();
    k.method = j["method"].get<std::string>();
    k.x = j["param_value"].get<double>();
    groups[k].push_back(j["xi_d_t"].get<double>());
  }
  if (groups.empty()) {
    throw config_error("no usable records found for the report");
  }

  struct ScenarioChart {
    const char* file;
    const char* title;
    const char* x_label;
    bool log2_x;
  };
  const std::map<std::string, ScenarioChart> chart_info = {
      {"s1", {"s1_accuracy_vs_size.svg", "Accuracy vs adaptation-set size",
              "|Delta_T| (log2)", true}},
      {"s2", {"s2_accuracy_vs_categories.svg", "Accuracy vs adapted categories",
              "categories in Delta_T", false}},
      {"s3", {"s3_accuracy_vs_domains.svg", "Accuracy vs adapted domains",
              "domains in Delta_T", false}},
      {"s4", {"s4_accuracy_vs_stack.svg", "Accuracy vs corruption-stack size",
              "stacked corruptions", false}},
  };

  std::map<std::string, std::string> charts;
  std::set<std::string> scenarios;
  for (const auto& [k, v] : groups) scenarios.insert(k.scenario);
  for (const auto& scenario : scenarios) {
    auto info_it = chart_info.find(scenario);
    if (info_it == chart_info.end()) continue;
    ChartSpec spec;
    spec.title = info_it->second.title;
    spec.x_label = info_it->second.x_label;
    spec.y_label = "accuracy on D_T";
    spec.log2_x = info_it->second.log2_x;

    std::set<std::string> methods;
    std::set<double> xs;
    for (const auto& [k, v] : groups) {
      if (k.scenario != scenario) continue;
      methods.insert(k.method);
      xs.insert(k.x);
    }
    spec.x_ticks.assign(xs.begin(), xs.end());
    for (const auto& method : methods) {
      ChartSeries series;
      series.label = method;
      for (double x : xs) {
        auto it = groups.find(Key{scenario, method, x});
        if (it == groups.end() || it->second.empty()) continue;
        SeriesPoint p;
        p.x = x;
        p.y = median(it->second);
        p.y_min = *std::min_element(it->second.begin(), it->second.end());
        p.y_max = *std::max_element(it->second.begin(), it->second.end());
        series.points.push_back(p);
      }
      if (!series.points.empty()) spec.series.push_back(std::move(series));
    }
    charts[info_it->second.file] = line_chart_svg(spec);
  }
  return charts;
}

}  // namespace ttb
