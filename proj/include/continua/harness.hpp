#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "continua/tensor.hpp"

namespace continua::harness {

/// Bad or unknown configuration; the CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite losses or solver blowups during training; exit code 3.
class NumericError : public Error {
 public:
  using Error::Error;
};

struct ModelSpec {
  std::string variant = "vanilla";  // vanilla | depthcat | anode | higher_order |
                                    // galerkin | hamiltonian | stable | cnf | ffjord
  std::size_t hidden = 64;
  std::size_t augment_dims = 0;
  std::size_t order = 1;
  std::size_t basis_terms = 3;     // galerkin
  std::size_t trace_samples = 1;   // ffjord
};

struct SolverSpec {
  std::string method = "dopri5";
  double rtol = 1e-4;
  double atol = 1e-4;
  double h_init = 0.0;  // solver default when 0
  std::size_t max_steps = 10000;
  double s0 = 0.0;
  double s1 = 1.0;
};

struct IntegralSpec {
  std::string kind = "none";  // none | kinetic
  double weight = 0.0;
};

struct OptimSpec {
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t steps = 500;
  std::size_t batch_size = 0;  // 0 = full batch
};

struct ExperimentConfig {
  std::string task;
  std::uint64_t seed = 0;
  std::size_t data_n = 512;
  ModelSpec model;
  SolverSpec solver;
  std::string sensitivity = "adjoint";  // autograd | adjoint
  IntegralSpec integral_loss;
  OptimSpec optim;
};

/// Parses and validates a config; unknown keys anywhere are rejected by name.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

struct MetricsReport {
  std::vector<double> losses;  // one entry per optimizer step, losses[0] = initial
  double final_metric = 0.0;   // accuracy, negative log-likelihood, or mse
  std::string metric_name;
  double nfe_forward = 0.0;
  double nfe_backward = 0.0;
  double wall_seconds = 0.0;
  std::string config_echo;  // canonical JSON of the resolved config

  std::string to_json() const;
};

/// Trains per config, writes metrics.json and checkpoint.json under out_dir
/// (plus trajectory.jsonl when requested). A non-finite loss aborts with the
/// last finite-loss checkpoint saved, then throws NumericError.
MetricsReport train(const ExperimentConfig& cfg, const std::string& out_dir,
                    bool dump_trajectory = false);

/// Rebuilds the model from config, loads the checkpoint strictly, and
/// reports metrics without mutating anything.
MetricsReport evaluate(const std::string& checkpoint_path, const ExperimentConfig& cfg);

}  // namespace continua::harness
