#include "ttabench/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "ttabench/report.hpp"
#include "ttabench/rng.hpp"

namespace ttb {

using nlohmann::json;

json default_run_config() {
  json c;
  c["version"] = 1;
  c["dataset"] = {{"corpus", "synthshapes"},
                  {"classes", 10},
                  {"train_per_class", 200},
                  {"target_per_class", 1000},
                  {"seed", 1},
                  {"scale", 0.2},
                  {"cifar_train_path", ""},
                  {"cifar_test_path", ""}};
  c["model"] = {{"arch", "smallcnn-32"},
                {"path", "model.ttbm"},
                {"pretrain", {{"epochs", 15},
                              {"lr", 0.05},
                              {"momentum", 0.9},
                              {"batch_size", 64},
                              {"label_smoothing", 0.0},
                              {"seed", 7}}}};
  json sizes = json::array();
  for (int s : default_s1_sweep()) sizes.push_back(s);
  c["scenario"] = {{"id", "s1"},
                   {"corruption", {{"tau", "gaussian_noise"}, {"mu", 5}}},
                   {"sizes", sizes},
                   {"k_list", {1, 2, 3, 5, 7, 9}},
                   {"per_class", 192},
                   {"domains", json::array({json::array({"gaussian_noise", 5}),
                                            json::array({"fog", 5}),
                                            json::array({"snow", 5}),
                                            json::array({"frost", 5}),
                                            json::array({"contrast", 5}),
                                            json::array({"brightness", 5})})},
                   {"per_domain", 192},
                   {"stacks", "triplet-prefixes"},
                   {"n", 512}};
  c["methods"] = {"none", "tent", "sar", "shot", "note", "t3a"};
  c["adapt"] = {{"batch_size", 64},
                {"epochs", 1},
                {"optimizer", "sgd_momentum"},
                {"lr", 0.001},
                {"momentum", 0.9},
                {"bn_momentum", 0.1},
                {"shot", {{"beta", 0.3}, {"pl_rounds", 2}}},
                {"sar", {{"e0_factor", 0.4}, {"rho", 0.05}, {"reset_factor", 0.2}}},
                {"note",
                 {{"alpha", 4.0},
                  {"reservoir", 64},
                  {"stats_momentum", 0.01},
                  {"affine_tune", false}}},
                {"t3a", {{"support_m", 20}}}};
  c["seeds"] = 5;
  c["jobs"] = 1;
  c["trace"] = false;
  c["base_seed"] = 1;
  c["output_dir"] = "out";
  return c;
}

json load_config_file(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const io_error& e) {
    throw config_error(std::string("cannot read config: ") + e.what());
  }
  json given;
  try {
    given = json::parse(text);
  } catch (const json::exception& e) {
    throw config_error(std::string("config is not valid JSON: ") + e.what());
  }
  // Fill unspecified keys from the defaults (one level of nesting).
  json config = default_run_config();
  for (const auto& [key, value] : given.items()) {
    if (value.is_object() && config.contains(key) && config[key].is_object()) {
      for (const auto& [k2, v2] : value.items()) config[key][k2] = v2;
    } else {
      config[key] = value;
    }
  }
  return config;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw config_error("--set expects key.path=value, got: " + assignment);
  }
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // plain string
  }
  std::string pointer = "/";
  for (char ch : path) pointer += ch == '.' ? '/' : ch;
  pointer.erase(0, 0);
  config[json::json_pointer(pointer)] = parsed;
}

namespace {

CorruptionSpec spec_from_json(const json& j) {
  CorruptionSpec spec;
  if (j.is_array() && j.size() == 2) {
    spec.tau = j[0].get<std::string>();
    spec.mu = j[1].get<int>();
  } else if (j.is_object()) {
    spec.tau = j.at("tau").get<std::string>();
    spec.mu = j.at("mu").get<int>();
  } else {
    throw config_error("corruption spec must be [tau, mu] or {tau, mu}");
  }
  validate_spec(spec);
  return spec;
}

Optimizer optimizer_from(const std::string& name) {
  if (name == "sgd") return Optimizer::kSgd;
  if (name == "sgd_momentum") return Optimizer::kSgdMomentum;
  if (name == "adam") return Optimizer::kAdam;
  throw config_error("unknown optimizer: " + name);
}

std::vector<std::vector<CorruptionSpec>> stacks_from_config(const json& sc) {
  const json& stacks = sc.at("stacks");
  if (stacks.is_string()) {
    const std::string name = stacks.get<std::string>();
    if (name == "pairs") return default_pairs();
    if (name == "triplets") return default_triplets();
    if (name == "triplet-prefixes") {
      // 1-, 2-, and 3-deep prefixes of the first default triplet: the
      // singleton/pair/triplet degradation sweep.
      const auto t = default_triplets().front();
      return {{t[0]}, {t[0], t[1]}, {t[0], t[1], t[2]}};
    }
    throw config_error("unknown stack preset: " + name);
  }
  std::vector<std::vector<CorruptionSpec>> out;
  for (const auto& stack : stacks) {
    std::vector<CorruptionSpec> specs;
    for (const auto& s : stack) specs.push_back(spec_from_json(s));
    if (specs.empty()) throw config_error("empty corruption stack");
    out.push_back(std::move(specs));
  }
  if (out.empty()) throw config_error("scenario 4 requires at least one stack");
  return out;
}

}  // namespace

void validate_run_config(const json& config) {
  if (config.value("version", 0) != 1) {
    throw config_error("unsupported config version");
  }
  const auto& dataset = config.at("dataset");
  const std::string corpus = dataset.at("corpus").get<std::string>();
  if (corpus != "synthshapes" && corpus != "cifar10") {
    throw config_error("unknown corpus: " + corpus);
  }
  const auto& model = config.at("model");
  if (model.at("arch").get<std::string>() != "smallcnn-32") {
    throw config_error("unknown arch: " + model.at("arch").get<std::string>());
  }
  for (const auto& m : config.at("methods")) {
    if (!is_known_method(m.get<std::string>())) {
      throw config_error("unknown method id: " + m.get<std::string>());
    }
  }
  const auto& sc = config.at("scenario");
  const std::string id = sc.at("id").get<std::string>();
  if (id != "s1" && id != "s2" && id != "s3" && id != "s4") {
    throw config_error("unknown scenario id: " + id);
  }
  if (id == "s1" || id == "s2") spec_from_json(sc.at("corruption"));
  if (id == "s3") {
    for (const auto& d : sc.at("domains")) spec_from_json(d);
  }
  if (id == "s4") stacks_from_config(sc);
  optimizer_from(config.at("adapt").at("optimizer").get<std::string>());
  if (config.at("seeds").get<int>() < 1) {
    throw config_error("seeds must be >= 1");
  }
}

std::string config_digest(const json& config) {
  return to_hex(fnv1a64(config.dump()));
}

AdaptConfig adapt_config_from(const json& config) {
  const json& a = config.at("adapt");
  AdaptConfig cfg;
  cfg.batch_size = a.value("batch_size", 64);
  cfg.epochs = a.value("epochs", 1);
  cfg.optimizer = optimizer_from(a.value("optimizer", std::string("sgd_momentum")));
  cfg.lr = a.value("lr", 1e-3f);
  cfg.momentum = a.value("momentum", 0.9f);
  cfg.bn_momentum = a.value("bn_momentum", 0.1f);
  const json& shot = a.value("shot", json::object());
  cfg.shot.beta = shot.value("beta", 0.3f);
  cfg.shot.pl_rounds = shot.value("pl_rounds", 2);
  const json& sar = a.value("sar", json::object());
  cfg.sar.e0_factor = sar.value("e0_factor", 0.4f);
  cfg.sar.rho = sar.value("rho", 0.05f);
  cfg.sar.reset_factor = sar.value("reset_factor", 0.2f);
  const json& note = a.value("note", json::object());
  cfg.note.alpha = note.value("alpha", 4.0f);
  cfg.note.reservoir = note.value("reservoir", 64);
  cfg.note.stats_momentum = note.value("stats_momentum", 0.01f);
  cfg.note.affine_tune = note.value("affine_tune", false);
  const json& t3a = a.value("t3a", json::object());
  cfg.t3a.support_m = t3a.value("support_m", 20);
  return cfg;
}

std::filesystem::path resolve_output_dir(const json& config) {
  std::filesystem::path dir = config.at("output_dir").get<std::string>();
  if (dir.is_relative()) {
    if (const char* root = std::getenv("TTABENCH_OUT")) {
      dir = std::filesystem::path(root) / dir;
    }
  }
  return dir;
}

namespace {

std::filesystem::path resolve_model_path(const json& config) {
  std::filesystem::path p = config.at("model").at("path").get<std::string>();
  if (p.is_relative()) {
    if (const char* root = std::getenv("TTABENCH_OUT")) {
      p = std::filesystem::path(root) / p;
    }
  }
  return p;
}

struct DataBundle {
  std::shared_ptr<LabeledDataset> train_pool;   // clean source data
  std::shared_ptr<LabeledDataset> target_pool;  // clean pool for shifts
};

DataBundle build_corpus(const json& dataset) {
  DataBundle out;
  const std::string corpus = dataset.at("corpus").get<std::string>();
  const std::uint64_t seed = dataset.at("seed").get<std::uint64_t>();
  if (corpus == "synthshapes") {
    const int classes = dataset.at("classes").get<int>();
    out.train_pool = std::make_shared<LabeledDataset>(generate_synthshapes(
        classes, dataset.at("train_per_class").get<int>(),
        seed_split(seed, "train")));
    out.target_pool = std::make_shared<LabeledDataset>(generate_synthshapes(
        classes, dataset.at("target_per_class").get<int>(),
        seed_split(seed, "target")));
    return out;
  }
  // cifar10 binary layout
  const std::string train_path = dataset.at("cifar_train_path").get<std::string>();
  const std::string test_path = dataset.at("cifar_test_path").get<std::string>();
  if (train_path.empty() || test_path.empty()) {
    throw config_error("cifar10 corpus requires cifar_train_path and cifar_test_path");
  }
  out.train_pool = std::make_shared<LabeledDataset>(load_cifar10_binary(
      train_path, dataset.at("train_per_class").get<int>(),
      seed_split(seed, "train")));
  out.target_pool = std::make_shared<LabeledDataset>(load_cifar10_binary(
      test_path, dataset.at("target_per_class").get<int>(),
      seed_split(seed, "target")));
  return out;
}

}  // namespace

ExperimentPlan build_experiment_plan(const json& config) {
  validate_run_config(config);
  ExperimentPlan plan;
  plan.cfg_digest = config_digest(config);
  plan.adapt = adapt_config_from(config);
  plan.grid.seeds = config.at("seeds").get<int>();
  plan.grid.base_seed = config.at("base_seed").get<std::uint64_t>();
  plan.grid.jobs = config.at("jobs").get<int>();
  plan.grid.trace = config.at("trace").get<bool>();

  const auto model_path = resolve_model_path(config);
  if (!std::filesystem::exists(model_path)) {
    throw config_error("model file not found: " + model_path.string() +
                       " (run the pretrain command first)");
  }
  plan.source = load_model(model_path);

  DataBundle data = build_corpus(config.at("dataset"));
  const json& sc = config.at("scenario");
  const std::string id = sc.at("id").get<std::string>();
  const std::uint64_t data_seed =
      config.at("dataset").at("seed").get<std::uint64_t>();
  const std::vector<std::string> methods =
      config.at("methods").get<std::vector<std::string>>();

  if (id == "s1" || id == "s2") {
    const CorruptionSpec spec = spec_from_json(sc.at("corruption"));
    auto d_t = std::make_shared<LabeledDataset>(make_target_domain(
        *data.target_pool, {spec}, seed_split(data_seed, "domain")));
    if (id == "s1") {
      for (const auto& size : sc.at("sizes")) {
        const int v = size.get<int>();
        for (const auto& method : methods) {
          GridCell cell;
          cell.cell_id = "s1/size=" + std::to_string(v) + "/" + method;
          cell.method = method;
          cell.param_label = "size";
          cell.param_value = v;
          const std::uint64_t cell_seed =
              seed_split(plan.grid.base_seed, cell.cell_id);
          cell.make_split = [d_t, v, cell_seed](int rep) {
            return scenario1(d_t, v,
                             seed_split(cell_seed, "split",
                                        static_cast<std::uint64_t>(rep)));
          };
          plan.cells.push_back(std::move(cell));
        }
      }
    } else {
      const int per_class = sc.at("per_class").get<int>();
      for (const auto& kj : sc.at("k_list")) {
        const int k = kj.get<int>();
        for (const auto& method : methods) {
          GridCell cell;
          cell.cell_id = "s2/k=" + std::to_string(k) + "/" + method;
          cell.method = method;
          cell.param_label = "k";
          cell.param_value = k;
          const std::uint64_t cell_seed =
              seed_split(plan.grid.base_seed, cell.cell_id);
          // Delta_T fixed across repetitions; only the batch order varies.
          cell.make_split = [d_t, k, per_class, cell_seed](int) {
            return scenario2(d_t, k, per_class, seed_split(cell_seed, "split"));
          };
          plan.cells.push_back(std::move(cell));
        }
      }
    }
  } else if (id == "s3") {
    std::vector<LabeledDataset> domains;
    std::size_t di = 0;
    for (const auto& dj : sc.at("domains")) {
      domains.push_back(make_target_domain(
          *data.target_pool, {spec_from_json(dj)},
          seed_split(data_seed, "domain", di++)));
    }
    auto domains_ptr =
        std::make_shared<std::vector<LabeledDataset>>(std::move(domains));
    const int per_domain = sc.at("per_domain").get<int>();
    for (const auto& kj : sc.at("k_list")) {
      const int k = kj.get<int>();
      if (k > static_cast<int>(domains_ptr->size())) continue;
      for (const auto& method : methods) {
        GridCell cell;
        cell.cell_id = "s3/k=" + std::to_string(k) + "/" + method;
        cell.method = method;
        cell.param_label = "k";
        cell.param_value = k;
        const std::uint64_t cell_seed =
            seed_split(plan.grid.base_seed, cell.cell_id);
        cell.make_split = [domains_ptr, k, per_domain, cell_seed](int rep) {
          return scenario3(*domains_ptr, k, per_domain,
                           seed_split(cell_seed, "split",
                                      static_cast<std::uint64_t>(rep)));
        };
        plan.cells.push_back(std::move(cell));
      }
    }
  } else {  // s4
    const int n = sc.at("n").get<int>();
    auto source_pool = data.target_pool;
    for (const auto& stack : stacks_from_config(sc)) {
      for (const auto& method : methods) {
        GridCell cell;
        cell.cell_id = "s4/stack=" + stack_id(stack) + "/" + method;
        cell.method = method;
        cell.param_label = "stack_size";
        cell.param_value = static_cast<double>(stack.size());
        const std::uint64_t cell_seed =
            seed_split(plan.grid.base_seed, cell.cell_id);
        cell.make_split = [source_pool, stack, n, cell_seed](int rep) {
          return scenario4(*source_pool, stack, n,
                           seed_split(cell_seed, "split",
                                      static_cast<std::uint64_t>(rep)));
        };
        plan.cells.push_back(std::move(cell));
      }
    }
  }
  if (plan.cells.empty()) {
    throw config_error("the configured scenario produced no grid cells");
  }
  return plan;
}

// ---------------------------------------------------------------------------
// commands

void cmd_pretrain(const json& config) {
  validate_run_config(config);
  const auto& model_cfg = config.at("model");
  const auto& pt = model_cfg.at("pretrain");
  DataBundle data = build_corpus(config.at("dataset"));

  Model base = build_model(model_cfg.at("arch").get<std::string>(),
                           config.at("dataset").at("classes").get<int>(),
                           pt.at("seed").get<std::uint64_t>());
  PretrainOpts opts;
  opts.epochs = pt.at("epochs").get<int>();
  opts.lr = pt.at("lr").get<float>();
  opts.momentum = pt.value("momentum", 0.9f);
  opts.batch_size = pt.value("batch_size", 64);
  opts.label_smoothing = pt.value("label_smoothing", 0.0f);
  opts.seed = pt.at("seed").get<std::uint64_t>();
  PretrainLog log;
  Model trained = pretrain_source(base, *data.train_pool, opts, &log);

  const auto model_path = resolve_model_path(config);
  save_model(trained, model_path);

  json log_json;
  log_json["epoch_losses"] = log.epoch_losses;
  log_json["model_digest"] = trained.digest();
  log_json["config_digest"] = config_digest(config);
  std::filesystem::path log_path = model_path;
  log_path += ".trainlog.json";
  atomic_write_file(log_path, log_json.dump(2) + "\n");
}

void cmd_run(const json& config) {
  ExperimentPlan plan = build_experiment_plan(config);
  const auto out_dir = resolve_output_dir(config);
  std::filesystem::create_directories(out_dir);
  plan.adapt.storage_dir = out_dir / "models";

  GridResult result = run_grid(plan.cells, plan.source, plan.adapt, plan.grid);
  for (auto& rec : result.records) rec.cfg_digest = plan.cfg_digest;

  atomic_write_file(out_dir / "records.jsonl", records_jsonl(result.records));
  atomic_write_file(out_dir / "summary.csv", summary_csv(result.summaries));
  atomic_write_file(out_dir / "run_config.json", config.dump(2) + "\n");
}

void cmd_profile(const json& config) {
  ExperimentPlan plan = build_experiment_plan(config);
  const auto out_dir = resolve_output_dir(config);
  std::filesystem::create_directories(out_dir);
  plan.adapt.storage_dir = out_dir / "models";

  // Profiled runs execute exclusively; the first configured cell's scenario
  // instance (rep 0) is the common workload.
  const GridCell& cell = plan.cells.front();
  ScenarioSplit split = cell.make_split(0);
  AdaptConfig cfg = plan.adapt;
  cfg.seed = seed_split(plan.grid.base_seed, "profile");

  std::vector<std::string> methods;
  for (const auto& m : config.at("methods")) {
    methods.push_back(m.get<std::string>());
  }
  std::vector<ResourceReport> reports =
      profile_methods(methods, plan.source, split, cfg);

  atomic_write_file(out_dir / "profile.csv", profile_csv(reports));
  atomic_write_file(out_dir / "profile.svg", profile_svg(reports));
  json sidecar = json::array();
  for (const auto& r : reports) {
    sidecar.push_back({{"method", r.method},
                       {"peak_bytes", r.peak_bytes},
                       {"alloc_events", r.alloc_events},
                       {"rss_peak_bytes", r.rss_peak_bytes},
                       {"cpu_ms", r.cpu_time_ms},
                       {"wall_ms", r.wall_ms},
                       {"relative_peak", r.relative_peak},
                       {"cfg_digest", plan.cfg_digest}});
  }
  atomic_write_file(out_dir / "profile.jsonl", sidecar.dump(2) + "\n");
}

void cmd_report(const std::filesystem::path& records_path,
                const std::filesystem::path& out_dir) {
  std::filesystem::path file = records_path;
  if (std::filesystem::is_directory(file)) file /= "records.jsonl";
  if (!std::filesystem::exists(file)) {
    throw config_error("records file not found: " + file.string());
  }
  const auto charts = build_report_charts(read_file(file));
  std::filesystem::create_directories(out_dir);
  for (const auto& [name, svg] : charts) {
    atomic_write_file(out_dir / name, svg);
  }
}

}  // namespace ttb
