// ttabench: pretrain a source classifier, run test-time-adaptation scenario
// grids, profile resource use, and render report charts.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ttabench/config.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

nlohmann::json make_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
  nlohmann::json config = config_path.empty()
                              ? ttb::default_run_config()
                              : ttb::load_config_file(config_path);
  for (const auto& assignment : overrides) {
    ttb::apply_override(config, assignment);
  }
  ttb::validate_run_config(config);
  return config;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    return kExitOk;
  } catch (const ttb::config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"test-time adaptation benchmark engine"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string records_path;
  std::string report_out = "report";

  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path,
                    "JSON run configuration (defaults used when omitted)");
    cmd->add_option("--set", overrides,
                    "override a config key, e.g. --set scenario.n=512");
  };

  CLI::App* pretrain = app.add_subcommand(
      "pretrain", "train the source model and write the model file");
  add_config_opts(pretrain);

  CLI::App* run = app.add_subcommand(
      "run", "execute the configured scenario grid; writes records + summary");
  add_config_opts(run);

  CLI::App* profile = app.add_subcommand(
      "profile", "measure peak memory and CPU time per method (pool size 1)");
  add_config_opts(profile);

  CLI::App* report = app.add_subcommand(
      "report", "render SVG charts from recorded results");
  report->add_option("records", records_path,
                     "records.jsonl file or the directory holding it")
      ->required();
  report->add_option("-o,--out", report_out, "chart output directory");

  CLI11_PARSE(app, argc, argv);

  if (pretrain->parsed()) {
    return guarded(
        [&] { ttb::cmd_pretrain(make_config(config_path, overrides)); });
  }
  if (run->parsed()) {
    return guarded([&] { ttb::cmd_run(make_config(config_path, overrides)); });
  }
  if (profile->parsed()) {
    return guarded(
        [&] { ttb::cmd_profile(make_config(config_path, overrides)); });
  }
  if (report->parsed()) {
    return guarded([&] { ttb::cmd_report(records_path, report_out); });
  }
  return kExitConfig;
}
