#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "ttabench/eval.hpp"
#include "ttabench/profiler.hpp"

namespace ttb {

// Run configuration: a versioned JSON document validated against the method,
// corruption, and scenario registries before any work starts. CLI flags
// override individual keys via dotted paths ("adapt.lr=0.01").

nlohmann::json default_run_config();
nlohmann::json load_config_file(const std::filesystem::path& path);

// assignment: "dotted.path=value"; value parsed as JSON, falling back to a
// plain string.
void apply_override(nlohmann::json& config, const std::string& assignment);

void validate_run_config(const nlohmann::json& config);

// Digest over the canonical (sorted-key) dump; stored in every record.
std::string config_digest(const nlohmann::json& config);

AdaptConfig adapt_config_from(const nlohmann::json& config);

// Resolves config["output_dir"] under the TTABENCH_OUT env var (when set and
// the path is relative).
std::filesystem::path resolve_output_dir(const nlohmann::json& config);

struct ExperimentPlan {
  Model source;
  std::vector<GridCell> cells;
  AdaptConfig adapt;
  GridOptions grid;
  std::string cfg_digest;
};

// Loads the model file and constructs datasets + grid cells for the
// configured scenario.
ExperimentPlan build_experiment_plan(const nlohmann::json& config);

// Command bodies (the CLI maps exceptions to exit codes):
//   pretrain -> model file + training log
//   run      -> records.jsonl + summary.csv
//   profile  -> profile.csv + profile.svg (+ profile.jsonl sidecar)
//   report   -> per-scenario SVG charts
void cmd_pretrain(const nlohmann::json& config);
void cmd_run(const nlohmann::json& config);
void cmd_profile(const nlohmann::json& config);
void cmd_report(const std::filesystem::path& records_path,
                const std::filesystem::path& out_dir);

}  // namespace ttb
