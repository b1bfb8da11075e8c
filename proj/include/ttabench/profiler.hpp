#pragma once

#include <string>
#include <vector>

#include "ttabench/eval.hpp"

namespace ttb {

struct ResourceReport {
  std::string method;
  std::int64_t peak_bytes = 0;       // engine allocator peak over the run
  std::int64_t alloc_events = 0;
  std::int64_t rss_peak_bytes = 0;   // process-lifetime OS peak, secondary
  double cpu_time_ms = 0.0;
  double wall_ms = 0.0;
  double relative_peak = 0.0;        // peak / baseline("none") peak
};

struct ProfileResult {
  AdaptOutcome outcome;
  ResourceReport report;  // relative_peak unset until normalized
};

// Wraps run_periodic_adaptation under a fresh allocator counter instance.
ProfileResult profile_run(const std::string& method, const Model& model,
                          const ScenarioSplit& split, const AdaptConfig& cfg);

// Profiles each method sequentially (parallelism 1) against the "none"
// baseline under the identical load/iterate/save protocol, and fills in
// relative peaks. "none" is added when missing.
std::vector<ResourceReport> profile_methods(const std::vector<std::string>& methods,
                                            const Model& model,
                                            const ScenarioSplit& split,
                                            const AdaptConfig& cfg);

// CSV (fixed header: method,peak_bytes,relative_peak,cpu_ms,wall_ms) and an
// SVG bar chart; rows and bars ordered by method id.
std::string profile_csv(std::vector<ResourceReport> reports);
std::string profile_svg(std::vector<ResourceReport> reports);

}  // namespace ttb
