// Command-line front end: maps subcommands onto the library entry points and
// library exceptions onto process exit codes.
#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "fedsilo/cli.hpp"
#include "fedsilo/errors.hpp"

namespace {

fedsilo::ExperimentConfig load_config(const std::string& config_path,
                                      const std::string& out_override,
                                      long long seed_override) {
  fedsilo::ExperimentConfig cfg = fedsilo::ExperimentConfig::from_json_file(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (seed_override >= 0) {
    cfg.seed = static_cast<std::uint64_t>(seed_override);
    cfg.fed.seed = cfg.seed;
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated silo survey experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fedsilo::kToolVersion));

  std::string config_path;
  std::string out_override;
  long long seed_override = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config JSON")->required();
    sub->add_option("--out", out_override, "override the configured output directory");
    sub->add_option("--seed", seed_override, "override the configured master seed")
        ->check(CLI::NonNegativeNumber);
  };

  CLI::App* gen = app.add_subcommand("generate-data", "write a synthetic survey CSV");
  add_common(gen);
  std::string gen_csv;
  gen->add_option("--csv", gen_csv, "write the CSV here instead of the run directory");

  CLI::App* train = app.add_subcommand("train", "train models and write metric artifacts");
  add_common(train);
  std::string mode = "all";
  train->add_option("--mode", mode, "federated | centralized | local-baselines | all")
      ->check(CLI::IsMember({"federated", "centralized", "local-baselines", "all"}));

  CLI::App* explain = app.add_subcommand("explain", "attribute model output to feature groups");
  add_common(explain);
  std::string model_path;
  explain->add_option("--model", model_path, "explain this parameter file instead of the run default");

  CLI::App* report = app.add_subcommand("report", "summarize a finished run directory");
  std::string run_dir;
  report->add_option("run_dir", run_dir, "run directory to summarize")->required();
  bool no_svg = false;
  report->add_flag("--no-svg", no_svg, "skip SVG plot generation");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      fedsilo::cmd_generate_data(load_config(config_path, out_override, seed_override), gen_csv);
    } else if (train->parsed()) {
      fedsilo::cmd_train(load_config(config_path, out_override, seed_override), mode);
    } else if (explain->parsed()) {
      fedsilo::cmd_explain(load_config(config_path, out_override, seed_override), model_path);
    } else if (report->parsed()) {
      fedsilo::cmd_report(run_dir, !no_svg);
    }
  } catch (const fedsilo::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const fedsilo::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
