#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "continua/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"continua: train and evaluate continuous-depth models from JSON configs"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = ".";
  std::string checkpoint_path;
  std::uint64_t seed = 0;
  bool dump_trajectory = false;

  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write metrics/checkpoint");
  train_cmd->add_option("--config", config_path, "Experiment config (JSON)")->required();
  train_cmd->add_option("--out", out_dir, "Output directory (default: current directory)");
  CLI::Option* seed_opt = train_cmd->add_option("--seed", seed, "Override the config seed");
  train_cmd->add_flag("--dump-trajectory", dump_trajectory, "Also write trajectory.jsonl");

  CLI::App* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint against a config");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint file (JSON)")->required();
  eval_cmd->add_option("--config", config_path, "Experiment config (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad flags are config errors
  }

  try {
    if (train_cmd->parsed()) {
      continua::harness::ExperimentConfig cfg = continua::harness::load_config(config_path);
      if (seed_opt->count() > 0) cfg.seed = seed;
      continua::harness::MetricsReport rep =
          continua::harness::train(cfg, out_dir, dump_trajectory);
      std::cout << "steps: " << (rep.losses.empty() ? 0 : rep.losses.size() - 1) << "\n"
                << "initial loss: " << rep.losses.front() << "\n"
                << "final loss: " << rep.losses.back() << "\n"
                << "final " << rep.metric_name << ": " << rep.final_metric << "\n"
                << "nfe forward: " << rep.nfe_forward << "  backward: " << rep.nfe_backward
                << "\n"
                << "wall seconds: " << rep.wall_seconds << "\n"
                << "outputs in: " << out_dir << "\n";
    } else {
      continua::harness::ExperimentConfig cfg = continua::harness::load_config(config_path);
      continua::harness::MetricsReport rep = continua::harness::evaluate(checkpoint_path, cfg);
      std::cout << rep.to_json() << "\n";
    }
  } catch (const continua::harness::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
