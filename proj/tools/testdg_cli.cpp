#include <filesystem>
#include <iostream>
#include <memory>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "testdg/checkpoint.hpp"
#include "testdg/harness.hpp"

namespace fs = std::filesystem;
using testdg::BaselineSpec;
using testdg::HarnessConfig;
using testdg::RunReport;
using testdg::ScenarioConfig;

namespace {

struct CommonArgs {
  std::string scenario_path;
  std::string config_path;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

void add_common(CLI::App* cmd, CommonArgs& args, bool scenario_required) {
  cmd->add_option("--scenario", args.scenario_path, "scenario JSON file")
      ->required(scenario_required);
  cmd->add_option("--config", args.config_path, "harness config JSON file (defaults built in)");
  cmd->add_option("--seed", args.seed, "run seed");
  cmd->add_option("--out", args.out_dir, "output directory");
}

HarnessConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return HarnessConfig{};
  return testdg::load_harness_config(path);
}

void write_reports(const RunReport& report, const fs::path& dir, const std::string& stem,
                   const std::string& format, bool timings) {
  fs::create_directories(dir);
  if (format == "json" || format == "both")
    testdg::emit_report(report, (dir / (stem + ".json")).string(), testdg::ReportFormat::json,
                        timings);
  if (format == "csv" || format == "both")
    testdg::emit_report(report, (dir / (stem + ".csv")).string(), testdg::ReportFormat::csv,
                        timings);
}

int cmd_pretrain(const CommonArgs& args) {
  ScenarioConfig scenario = testdg::load_scenario(args.scenario_path);
  HarnessConfig cfg = load_config_or_default(args.config_path);
  testdg::PretrainResult res =
      testdg::pretrain_source(scenario.task, cfg.model, cfg.pretrain, args.seed);
  if (res.diverged || !res.converged) {
    std::cerr << res.diagnostic << "\nloss trace:";
    for (double l : res.loss_trace) std::cerr << ' ' << l;
    std::cerr << '\n';
    return 1;
  }
  fs::create_directories(args.out_dir);
  fs::path out = fs::path(args.out_dir) / "checkpoint.json";
  testdg::save_checkpoint(*res.encoder, out.string());
  std::cout << "source error " << res.source_error * 100.0 << "% -> " << out.string() << '\n';
  return 0;
}

int cmd_run(const CommonArgs& args, const std::string& checkpoint_path,
            const std::string& baseline_name, const std::string& format, bool timings,
            bool generalize) {
  ScenarioConfig scenario = testdg::load_scenario(args.scenario_path);
  HarnessConfig cfg = load_config_or_default(args.config_path);
  std::unique_ptr<testdg::EncoderNet> encoder = testdg::load_checkpoint(checkpoint_path);
  BaselineSpec baseline = testdg::resolve_baseline(baseline_name);
  RunReport report = generalize
                         ? testdg::run_generalization(*encoder, scenario, cfg.adapt, baseline,
                                                      args.seed)
                         : testdg::run_scenario(*encoder, scenario, cfg.adapt, baseline, args.seed);
  write_reports(report, args.out_dir, "report", format, timings);
  std::cout << baseline.name << " mean error " << report.mean_error * 100.0 << "%";
  if (report.has_generalization)
    std::cout << ", held-out mean error " << report.generalization_mean_error * 100.0 << "%";
  std::cout << '\n';
  return 0;
}

int cmd_ablate(const CommonArgs& args, const std::string& checkpoint_path,
               const std::string& format, bool timings) {
  ScenarioConfig scenario = testdg::load_scenario(args.scenario_path);
  HarnessConfig cfg = load_config_or_default(args.config_path);
  std::unique_ptr<testdg::EncoderNet> encoder = testdg::load_checkpoint(checkpoint_path);

  nlohmann::ordered_json summary;
  summary["schema_version"] = 1;
  summary["scenario"] = scenario.name;
  summary["seed"] = args.seed;
  summary["rows"] = nlohmann::ordered_json::array();
  for (const BaselineSpec& row : testdg::ablation_matrix()) {
    RunReport report = testdg::run_scenario(*encoder, scenario, cfg.adapt, row, args.seed);
    write_reports(report, args.out_dir, "report-" + row.name, format, timings);
    summary["rows"].push_back({{"baseline", row.name}, {"mean_error", report.mean_error}});
    std::cout << row.name << " mean error " << report.mean_error * 100.0 << "%\n";
  }
  fs::path out = fs::path(args.out_dir) / "summary.json";
  std::ofstream file(out);
  if (!file) throw std::runtime_error("cannot write " + out.string());
  file << summary.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"online test-time domain generalization on synthetic streams"};
  app.require_subcommand(1);

  CommonArgs pre_args, run_args, gen_args, abl_args;
  std::string run_checkpoint, gen_checkpoint, abl_checkpoint;
  std::string run_baseline = "full-testdg", gen_baseline = "full-testdg";
  std::string run_format = "json", gen_format = "json", abl_format = "json";
  bool run_timings = false, gen_timings = false, abl_timings = false;

  CLI::App* pre = app.add_subcommand("pretrain", "fit the source model and write a checkpoint");
  add_common(pre, pre_args, true);

  CLI::App* run = app.add_subcommand("run", "online adaptation over a scenario stream");
  add_common(run, run_args, true);
  run->add_option("--checkpoint", run_checkpoint, "checkpoint JSON file")->required();
  run->add_option("--baseline", run_baseline, "baseline kind");
  run->add_option("--format", run_format, "json, csv or both")
      ->check(CLI::IsMember({"json", "csv", "both"}));
  run->add_flag("--timings", run_timings, "include wall clock in JSON reports");

  CLI::App* gen = app.add_subcommand("generalize", "adapt, freeze, evaluate held-out domains");
  add_common(gen, gen_args, true);
  gen->add_option("--checkpoint", gen_checkpoint, "checkpoint JSON file")->required();
  gen->add_option("--baseline", gen_baseline, "baseline kind");
  gen->add_option("--format", gen_format, "json, csv or both")
      ->check(CLI::IsMember({"json", "csv", "both"}));
  gen->add_flag("--timings", gen_timings, "include wall clock in JSON reports");

  CLI::App* abl = app.add_subcommand("ablate", "run the component ablation matrix");
  add_common(abl, abl_args, true);
  abl->add_option("--checkpoint", abl_checkpoint, "checkpoint JSON file")->required();
  abl->add_option("--format", abl_format, "json, csv or both")
      ->check(CLI::IsMember({"json", "csv", "both"}));
  abl->add_flag("--timings", abl_timings, "include wall clock in JSON reports");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_pretrain(pre_args);
    if (run->parsed())
      return cmd_run(run_args, run_checkpoint, run_baseline, run_format, run_timings, false);
    if (gen->parsed())
      return cmd_run(gen_args, gen_checkpoint, gen_baseline, gen_format, gen_timings, true);
    if (abl->parsed()) return cmd_ablate(abl_args, abl_checkpoint, abl_format, abl_timings);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 1;
}
