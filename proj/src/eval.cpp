#include "ttabench/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "ttabench/rng.hpp"

namespace ttb {

using nlohmann::json;

namespace {

constexpr int kEvalBatch = 64;  // protocol batch size everywhere

int count_correct(const Model& model, const Tensor& images,
                  const std::vector<int>& labels) {
  ForwardOutput out = forward_eval(model, images);
  const std::vector<int> pred = argmax_rows(out.logits);
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (pred[i] == labels[i]) ++correct;
  }
  return correct;
}

// The source model is re-evaluated on the same frozen test sets in every
// grid record; evaluation is pure, so memoize by content digests.
template <typename EvalFn>
double cached_eval(const std::string& key, EvalFn&& eval) {
  static std::mutex mu;
  static std::unordered_map<std::string, double> cache;
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
  }
  const double value = eval();
  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(key, value);
  return value;
}

double source_accuracy_cached(const Model& source, const LabeledDataset& test,
                              const std::string& test_digest) {
  return cached_eval(source.digest() + "/" + test_digest,
                     [&] { return accuracy(source, test).xi; });
}

double source_accuracy_cached(const Model& source, const AdaptationSet& test,
                              const std::string& id) {
  return cached_eval(source.digest() + "/" + test.digest(),
                     [&] { return accuracy(source, test, id).xi; });
}

}  // namespace

Metric accuracy(const Model& model, const LabeledDataset& test) {
  if (test.size() == 0) throw config_error("accuracy on an empty test set");
  const std::string digest_before = model.digest();
  int correct = 0;
  for (int start = 0; start < test.size(); start += kEvalBatch) {
    const int bsz = std::min(kEvalBatch, test.size() - start);
    std::vector<int> idx(static_cast<std::size_t>(bsz));
    for (int i = 0; i < bsz; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    correct += count_correct(model, test.gather_images(idx),
                             test.gather_labels(idx));
  }
  if (model.digest() != digest_before) {
    throw numeric_error("evaluation mutated the model");
  }
  Metric m;
  m.xi = static_cast<double>(correct) / test.size();
  m.test_set_id = "d_t";
  m.n = test.size();
  return m;
}

Metric accuracy(const Model& model, const AdaptationSet& test,
                const std::string& test_set_id) {
  if (test.size() == 0) throw config_error("accuracy on an empty test set");
  const std::string digest_before = model.digest();
  const std::vector<int> labels = detail::LabelOracleKey::labels(test);
  int correct = 0;
  for (int start = 0; start < test.size(); start += kEvalBatch) {
    const int bsz = std::min(kEvalBatch, test.size() - start);
    std::vector<int> pos(static_cast<std::size_t>(bsz));
    std::vector<int> batch_labels(static_cast<std::size_t>(bsz));
    for (int i = 0; i < bsz; ++i) {
      pos[static_cast<std::size_t>(i)] = start + i;
      batch_labels[static_cast<std::size_t>(i)] =
          labels[static_cast<std::size_t>(start + i)];
    }
    correct += count_correct(model, test.gather_images(pos), batch_labels);
  }
  if (model.digest() != digest_before) {
    throw numeric_error("evaluation mutated the model");
  }
  Metric m;
  m.xi = static_cast<double>(correct) / test.size();
  m.test_set_id = test_set_id;
  m.n = test.size();
  return m;
}

double relative_gain(double xi_adapted, double xi_source) {
  if (xi_source <= 0.0) {
    throw gain_error("relative gain undefined: source accuracy is zero");
  }
  return xi_adapted / xi_source;
}

double mean_eval_entropy(const Model& model, const AdaptationSet& set) {
  if (set.size() == 0) throw config_error("entropy on an empty set");
  double total = 0.0;
  for (int start = 0; start < set.size(); start += kEvalBatch) {
    const int bsz = std::min(kEvalBatch, set.size() - start);
    std::vector<int> pos(static_cast<std::size_t>(bsz));
    for (int i = 0; i < bsz; ++i) pos[static_cast<std::size_t>(i)] = start + i;
    ForwardOutput out = forward_eval(model, set.gather_images(pos));
    for (float h : row_entropies(out.logits)) total += h;
  }
  return total / set.size();
}

std::optional<double> ols_slope(const std::vector<double>& ys) {
  const std::size_t n = ys.size();
  if (n < 2) return std::nullopt;
  double x_mean = (static_cast<double>(n) - 1.0) / 2.0;
  double y_mean = 0.0;
  for (double y : ys) y_mean += y;
  y_mean /= static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - x_mean;
    num += dx * (ys[i] - y_mean);
    den += dx * dx;
  }
  return num / den;
}

BatchTrace batch_trace(const std::string& method, const Model& model,
                       const ScenarioSplit& split, const AdaptConfig& cfg) {
  BatchTrace trace;
  const std::vector<int> labels =
      detail::LabelOracleKey::labels(split.delta_t);
  BatchHook hook = [&](int, const std::vector<int>& positions,
                       const Model& current) {
    std::vector<int> batch_labels;
    batch_labels.reserve(positions.size());
    for (int p : positions) {
      batch_labels.push_back(labels[static_cast<std::size_t>(p)]);
    }
    const int correct = count_correct(
        current, split.delta_t.gather_images(positions), batch_labels);
    trace.accuracies.push_back(static_cast<double>(correct) /
                               static_cast<double>(positions.size()));
  };
  adapt_method(method, model, split.delta_t, cfg, hook);
  trace.slope = ols_slope(trace.accuracies);
  return trace;
}

// ---------------------------------------------------------------------------
// records

json ExperimentRecord::to_json() const {
  json j;
  j["record_version"] = record_version;
  j["scenario"] = {{"id", scenario.scenario_id},
                   {"params", json::parse(scenario.params_json)},
                   {"seed", scenario.seed}};
  j["method"] = method;
  j["cfg_digest"] = cfg_digest;
  j["seed"] = seed;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v) {
      j[key] = *v;
    } else {
      j[key] = nullptr;
    }
  };
  put("xi_delta_t", xi_delta_t);
  put("xi_d_t", xi_d_t);
  put("xi_delta_ood", xi_delta_ood);
  put("xi_src_delta_t", xi_src_delta_t);
  put("xi_src_d_t", xi_src_d_t);
  put("xi_src_delta_ood", xi_src_delta_ood);
  put("gain_delta_t", gain_delta_t);
  put("gain_d_t", gain_d_t);
  put("gain_delta_ood", gain_delta_ood);
  put("entropy_delta_t_src", entropy_delta_t_src);
  put("entropy_delta_t_adapted", entropy_delta_t_adapted);
  if (trace) {
    j["trace"] = {{"accuracies", trace->accuracies}};
    if (trace->slope) {
      j["trace"]["slope"] = *trace->slope;
    } else {
      j["trace"]["slope"] = nullptr;
    }
  }
  j["resources"] = {{"peak_bytes", resources.peak_bytes},
                    {"alloc_events", resources.alloc_events},
                    {"rss_peak_bytes", resources.rss_peak_bytes},
                    {"cpu_ms", resources.cpu_ms},
                    {"wall_ms", resources.wall_ms}};
  j["failed"] = failed;
  j["failure_message"] = failure_message;
  j["low_confidence"] = low_confidence;
  j["source_model_digest"] = source_model_digest;
  j["adapted_model_digest"] = adapted_model_digest;
  j["d_t_digest"] = d_t_digest;
  j["delta_t_digest"] = delta_t_digest;
  j["batches"] = batches;
  j["param_label"] = param_label;
  j["param_value"] = param_value;
  return j;
}

ExperimentRecord run_cell_once(const GridCell& cell, const Model& source,
                               const AdaptConfig& base_cfg,
                               std::uint64_t rep_seed, int rep, bool trace) {
  ExperimentRecord rec;
  rec.method = cell.method;
  rec.param_label = cell.param_label;
  rec.param_value = cell.param_value;
  rec.seed = rep_seed;
  rec.source_model_digest = source.digest();

  ScenarioSplit split = cell.make_split(rep);
  rec.scenario = split.descriptor;
  rec.d_t_digest = split.d_t->digest();
  rec.delta_t_digest = split.delta_t.digest();
  rec.low_confidence = split.delta_t.size() < 256;

  AdaptConfig cfg = base_cfg;
  cfg.seed = rep_seed;

  auto stats = std::make_shared<AllocStats>();
  OpCounters counters;
  const double wall0 = wall_seconds();
  const double cpu0 = process_cpu_seconds();
  {
    MemoryScope mem(stats);
    CounterScope cnt(counters);

    rec.entropy_delta_t_src = mean_eval_entropy(source, split.delta_t);

    AdaptOutcome outcome;
    if (trace) {
      BatchTrace bt;
      const std::vector<int> labels =
          detail::LabelOracleKey::labels(split.delta_t);
      BatchHook hook = [&](int, const std::vector<int>& positions,
                           const Model& current) {
        std::vector<int> batch_labels;
        batch_labels.reserve(positions.size());
        for (int p : positions) {
          batch_labels.push_back(labels[static_cast<std::size_t>(p)]);
        }
        const int correct = count_correct(
            current, split.delta_t.gather_images(positions), batch_labels);
        bt.accuracies.push_back(static_cast<double>(correct) /
                                static_cast<double>(positions.size()));
      };
      outcome = run_periodic_adaptation(cell.method, source, split, cfg, hook);
      bt.slope = ols_slope(bt.accuracies);
      rec.trace = std::move(bt);
    } else {
      outcome = run_periodic_adaptation(cell.method, source, split, cfg);
    }
    rec.failed = outcome.failed;
    rec.failure_message = outcome.failure_message;
    rec.batches = outcome.batches;
    rec.adapted_model_digest = outcome.model.digest();

    const Metric m_delta = accuracy(outcome.model, split.delta_t, "delta_t");
    const Metric m_dt = accuracy(outcome.model, *split.d_t);
    rec.xi_delta_t = m_delta.xi;
    rec.xi_d_t = m_dt.xi;
    rec.xi_src_delta_t = accuracy(source, split.delta_t, "delta_t").xi;
    rec.xi_src_d_t = source_accuracy_cached(source, *split.d_t, rec.d_t_digest);
    if (split.delta_ood && split.delta_ood->size() > 0) {
      rec.xi_delta_ood = accuracy(outcome.model, *split.delta_ood, "delta_ood").xi;
      rec.xi_src_delta_ood =
          source_accuracy_cached(source, *split.delta_ood, "delta_ood");
    }
    rec.entropy_delta_t_adapted = mean_eval_entropy(outcome.model, split.delta_t);

    auto gain_of = [](const std::optional<double>& adapted,
                      const std::optional<double>& src) -> std::optional<double> {
      if (!adapted || !src || *src <= 0.0) return std::nullopt;
      return relative_gain(*adapted, *src);
    };
    rec.gain_delta_t = gain_of(rec.xi_delta_t, rec.xi_src_delta_t);
    rec.gain_d_t = gain_of(rec.xi_d_t, rec.xi_src_d_t);
    rec.gain_delta_ood = gain_of(rec.xi_delta_ood, rec.xi_src_delta_ood);

    std::filesystem::remove(outcome.model_path);
  }
  rec.resources.peak_bytes = stats->peak_bytes.load();
  rec.resources.alloc_events = stats->alloc_events.load();
  rec.resources.rss_peak_bytes = process_peak_rss_bytes();
  rec.resources.cpu_ms = (process_cpu_seconds() - cpu0) * 1e3;
  rec.resources.wall_ms = (wall_seconds() - wall0) * 1e3;
  return rec;
}

double median(std::vector<double> values) {
  if (values.empty()) throw config_error("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<CellSummary> summarize(const std::vector<GridCell>& cells,
                                   const std::vector<ExperimentRecord>& records,
                                   int seeds) {
  std::vector<CellSummary> out;
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    CellSummary s;
    s.cell_id = cells[ci].cell_id;
    s.method = cells[ci].method;
    s.param_label = cells[ci].param_label;
    s.param_value = cells[ci].param_value;
    std::vector<double> xi_delta, xi_dt, xi_ood, gain_dt, peak, cpu;
    for (int rep = 0; rep < seeds; ++rep) {
      const ExperimentRecord& r = records[ci * static_cast<std::size_t>(seeds) +
                                          static_cast<std::size_t>(rep)];
      s.scenario_id = r.scenario.scenario_id;
      if (r.failed) {
        s.failed_count += 1;
        continue;  // medians over successes, with the count noted
      }
      s.seed_count += 1;
      if (r.xi_delta_t) xi_delta.push_back(*r.xi_delta_t);
      if (r.xi_d_t) xi_dt.push_back(*r.xi_d_t);
      if (r.xi_delta_ood) xi_ood.push_back(*r.xi_delta_ood);
      if (r.gain_d_t) gain_dt.push_back(*r.gain_d_t);
      peak.push_back(static_cast<double>(r.resources.peak_bytes));
      cpu.push_back(r.resources.cpu_ms);
    }
    if (!xi_delta.empty()) s.xi_delta_t = median(xi_delta);
    if (!xi_dt.empty()) {
      s.xi_d_t = median(xi_dt);
      s.xi_d_t_min = *std::min_element(xi_dt.begin(), xi_dt.end());
      s.xi_d_t_max = *std::max_element(xi_dt.begin(), xi_dt.end());
    }
    if (!xi_ood.empty()) s.xi_delta_ood = median(xi_ood);
    if (!gain_dt.empty()) s.gain_d_t = median(gain_dt);
    if (!peak.empty()) s.peak_bytes = median(peak);
    if (!cpu.empty()) s.cpu_ms = median(cpu);
    out.push_back(std::move(s));
  }
  return out;
}

GridResult run_grid(const std::vector<GridCell>& cells, const Model& source,
                    const AdaptConfig& base_cfg, const GridOptions& opts) {
  GridResult result;
  const std::size_t total =
      cells.size() * static_cast<std::size_t>(opts.seeds);
  result.records.resize(total);

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= total) break;
      const std::size_t ci = i / static_cast<std::size_t>(opts.seeds);
      const int rep = static_cast<int>(i % static_cast<std::size_t>(opts.seeds));
      const std::uint64_t rep_seed =
          seed_split(opts.base_seed, cells[ci].cell_id,
                     static_cast<std::uint64_t>(rep));
      result.records[i] = run_cell_once(cells[ci], source, base_cfg, rep_seed,
                                        rep, opts.trace);
    }
  };
  const int jobs = std::max(1, opts.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  result.summaries = summarize(cells, result.records, opts.seeds);
  return result;
}

// ---------------------------------------------------------------------------
// projections

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string();
}

}  // namespace

std::string summary_csv(const std::vector<CellSummary>& summaries) {
  std::ostringstream os;
  os << "scenario,method,param,seed_count,xi_delta_t,xi_d_t,xi_ood,gain_d_t,"
        "peak_bytes,cpu_ms\n";
  for (const auto& s : summaries) {
    os << s.scenario_id << ',' << s.method << ',' << fmt_double(s.param_value)
       << ',' << s.seed_count << ',' << fmt_opt(s.xi_delta_t) << ','
       << fmt_opt(s.xi_d_t) << ',' << fmt_opt(s.xi_delta_ood) << ','
       << fmt_opt(s.gain_d_t) << ',' << fmt_double(s.peak_bytes) << ','
       << fmt_double(s.cpu_ms) << '\n';
  }
  return os.str();
}

std::string records_jsonl(const std::vector<ExperimentRecord>& records) {
  std::ostringstream os;
  for (const auto& r : records) os << r.to_json().dump() << '\n';
  return os.str();
}

}  // namespace ttb
