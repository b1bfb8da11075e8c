#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttabench/tta.hpp"

namespace ttb {

class gain_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Metric {
  double xi = 0.0;          // exact correct/n
  std::string test_set_id;  // delta_t | d_t | delta_ood
  int n = 0;
};

// Exact top-1 accuracy under frozen inference. Asserts evaluation purity:
// the model digest is identical before and after.
Metric accuracy(const Model& model, const LabeledDataset& test);
Metric accuracy(const Model& model, const AdaptationSet& test,
                const std::string& test_set_id);

// xi(theta_adapted, D) / xi(theta_S, D); xi_source must be positive.
double relative_gain(double xi_adapted, double xi_source);

// Mean per-sample prediction entropy under frozen inference.
double mean_eval_entropy(const Model& model, const AdaptationSet& set);

struct BatchTrace {
  std::vector<double> accuracies;   // post-update accuracy on each batch
  std::optional<double> slope;      // OLS over (batch index, accuracy)
};

std::optional<double> ols_slope(const std::vector<double>& ys);

// Runs the adaptation and records the current model's frozen-eval accuracy
// on each just-processed batch.
BatchTrace batch_trace(const std::string& method, const Model& model,
                       const ScenarioSplit& split, const AdaptConfig& cfg);

struct ResourceStats {
  std::int64_t peak_bytes = 0;
  std::int64_t alloc_events = 0;
  std::int64_t rss_peak_bytes = 0;
  double cpu_ms = 0.0;
  double wall_ms = 0.0;
};

struct ExperimentRecord {
  int record_version = 1;
  ScenarioDescriptor scenario;
  std::string method;
  std::string cfg_digest;
  std::uint64_t seed = 0;

  std::optional<double> xi_delta_t, xi_d_t, xi_delta_ood;
  std::optional<double> xi_src_delta_t, xi_src_d_t, xi_src_delta_ood;
  std::optional<double> gain_delta_t, gain_d_t, gain_delta_ood;
  std::optional<double> entropy_delta_t_src, entropy_delta_t_adapted;
  std::optional<BatchTrace> trace;

  ResourceStats resources;
  bool failed = false;
  std::string failure_message;
  bool low_confidence = false;  // |Delta_T| < 256

  std::string source_model_digest;
  std::string adapted_model_digest;
  std::string d_t_digest;
  std::string delta_t_digest;

  int batches = 0;
  std::string param_label;
  double param_value = 0.0;

  nlohmann::json to_json() const;
};

// One grid cell: a scenario instance x method. make_split(rep) builds the
// per-repetition split; scenario 2 keeps the split fixed across repetitions
// (only the batch order varies), the others resample per repetition.
struct GridCell {
  std::string cell_id;
  std::string method;
  std::string param_label;
  double param_value = 0.0;
  std::function<ScenarioSplit(int rep)> make_split;
};

struct CellSummary {
  std::string cell_id;
  std::string scenario_id;
  std::string method;
  std::string param_label;
  double param_value = 0.0;
  int seed_count = 0;  // successful repetitions
  int failed_count = 0;
  std::optional<double> xi_delta_t, xi_d_t, xi_delta_ood, gain_d_t;
  std::optional<double> xi_d_t_min, xi_d_t_max;
  double peak_bytes = 0.0;
  double cpu_ms = 0.0;
};

struct GridOptions {
  int seeds = 5;
  std::uint64_t base_seed = 1;
  int jobs = 1;
  bool trace = false;
};

struct GridResult {
  std::vector<ExperimentRecord> records;    // cell-major, then repetition
  std::vector<CellSummary> summaries;       // one per cell
};

// Runs a single (cell, repetition) experiment under isolated counters.
ExperimentRecord run_cell_once(const GridCell& cell, const Model& source,
                               const AdaptConfig& base_cfg,
                               std::uint64_t rep_seed, int rep, bool trace);

GridResult run_grid(const std::vector<GridCell>& cells, const Model& source,
                    const AdaptConfig& base_cfg, const GridOptions& opts);

std::vector<CellSummary> summarize(const std::vector<GridCell>& cells,
                                   const std::vector<ExperimentRecord>& records,
                                   int seeds);

double median(std::vector<double> values);

// Flat CSV projection of the per-cell summaries (fixed column set).
std::string summary_csv(const std::vector<CellSummary>& summaries);

// Line-delimited JSON of all records.
std::string records_jsonl(const std::vector<ExperimentRecord>& records);

}  // namespace ttb
