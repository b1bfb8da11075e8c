#include "ttabench/profiler.hpp"

#include <algorithm>
#include <sstream>

#include "ttabench/report.hpp"

namespace ttb {

ProfileResult profile_run(const std::string& method, const Model& model,
                          const ScenarioSplit& split, const AdaptConfig& cfg) {
  ProfileResult result;
  result.report.method = method;
  auto stats = std::make_shared<AllocStats>();  // counters reset for the run
  const double wall0 = wall_seconds();
  const double cpu0 = process_cpu_seconds();
  {
    MemoryScope scope(stats);
    result.outcome = run_periodic_adaptation(method, model, split, cfg);
  }
  result.report.cpu_time_ms = (process_cpu_seconds() - cpu0) * 1e3;
  result.report.wall_ms = (wall_seconds() - wall0) * 1e3;
  result.report.peak_bytes = stats->peak_bytes.load();
  result.report.alloc_events = stats->alloc_events.load();
  result.report.rss_peak_bytes = process_peak_rss_bytes();
  return result;
}

std::vector<ResourceReport> profile_methods(
    const std::vector<std::string>& methods, const Model& model,
    const ScenarioSplit& split, const AdaptConfig& cfg) {
  std::vector<std::string> ordered = methods;
  if (std::find(ordered.begin(), ordered.end(), "none") == ordered.end()) {
    ordered.insert(ordered.begin(), "none");
  }
  std::vector<ResourceReport> reports;
  std::int64_t baseline = 0;
  for (const auto& method : ordered) {
    ProfileResult r = profile_run(method, model, split, cfg);
    if (method == "none") baseline = r.report.peak_bytes;
    reports.push_back(r.report);
  }
  if (baseline <= 0) throw numeric_error("baseline profile peak is zero");
  for (auto& r : reports) {
    r.relative_peak =
        static_cast<double>(r.peak_bytes) / static_cast<double>(baseline);
  }
  return reports;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void sort_by_method(std::vector<ResourceReport>& reports) {
  std::sort(reports.begin(), reports.end(),
            [](const ResourceReport& a, const ResourceReport& b) {
              return a.method < b.method;
            });
}

}  // namespace

std::string profile_csv(std::vector<ResourceReport> reports) {
  sort_by_method(reports);
  std::ostringstream os;
  os << "method,peak_bytes,relative_peak,cpu_ms,wall_ms\n";
  for (const auto& r : reports) {
    os << r.method << ',' << r.peak_bytes << ',' << fmt(r.relative_peak) << ','
       << fmt(r.cpu_time_ms) << ',' << fmt(r.wall_ms) << '\n';
  }
  return os.str();
}

std::string profile_svg(std::vector<ResourceReport> reports) {
  sort_by_method(reports);
  std::vector<Bar> bars;
  for (const auto& r : reports) {
    Bar b;
    b.label = r.method;
    b.value = static_cast<double>(r.peak_bytes) / (1024.0 * 1024.0);
    b.annotation = fmt(r.relative_peak) + "x";
    bars.push_back(std::move(b));
  }
  return bar_chart_svg("Peak memory during adaptation", "peak MiB", bars);
}

}  // namespace ttb
