#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "continua/datasets.hpp"
#include "continua/harness.hpp"
#include "continua/tensor.hpp"
#include "test_support.hpp"

using namespace continua;
namespace hz = continua::harness;
namespace fs = std::filesystem;

namespace {

void expect_config_error(const std::string& text, const std::string& needle) {
  try {
    hz::parse_config(text);
    FAIL("config accepted: ", text);
  } catch (const hz::ConfigError& e) {
    INFO("message: ", e.what());
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
}

// Scoped scratch directory; removed on destruction.
struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& tag) : path(fs::path("hz_scratch_" + tag)) {
    fs::remove_all(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_file(const std::string& p) {
  std::ifstream in(p);
  REQUIRE(bool(in));
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("datasets: determinism, shapes, closed forms") {
  auto a = datasets::generate("classify_moons", 1000, 7);
  auto b = datasets::generate("classify_moons", 1000, 7);
  CHECK(a.inputs.shape() == Shape{1000, 2});
  CHECK(a.targets.shape() == Shape{1000});
  CHECK(a.has_targets);
  for (std::size_t i = 0; i < a.inputs.numel(); ++i) CHECK(a.inputs.at(i) == b.inputs.at(i));
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK(a.targets.at(i) == static_cast<double>(i % 2));
  }
  auto c = datasets::generate("classify_moons", 1000, 8);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.inputs.numel() && !any_diff; ++i) {
    any_diff = a.inputs.at(i) != c.inputs.at(i);
  }
  CHECK(any_diff);  // the seed matters

  auto osc = datasets::generate("oscillator_regression", 64, 3);
  CHECK(osc.inputs.shape() == Shape{64, 2});
  CHECK(osc.targets.shape() == Shape{64, 1});
  for (std::size_t i = 0; i < 64; ++i) {
    const double want = std::cos(1.0) * osc.inputs.at(i, 0) + std::sin(1.0) * osc.inputs.at(i, 1);
    CHECK(osc.targets.at(i, 0) == want);
  }

  auto dens = datasets::generate("density_gaussians", 128, 1);
  CHECK(dens.inputs.shape() == Shape{128, 2});
  CHECK_FALSE(dens.has_targets);

  auto circ = datasets::generate("classify_circles", 50, 2);
  CHECK(circ.inputs.shape() == Shape{50, 2});

  CHECK(datasets::task_known("classify_moons"));
  CHECK_FALSE(datasets::task_known("mnist"));
  CHECK_THROWS_AS(datasets::generate("classify_moons", 0, 1), Error);
  try {
    datasets::generate("mnist", 10, 1);
    FAIL("unknown task accepted");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("classify_moons, classify_circles") != std::string::npos);
  }
}

TEST_CASE("config parsing: defaults and full round trip") {
  auto cfg = hz::parse_config(R"({"task": "classify_moons"})");
  CHECK(cfg.task == "classify_moons");
  CHECK(cfg.seed == 0);
  CHECK(cfg.data_n == 512);
  CHECK(cfg.model.variant == "vanilla");
  CHECK(cfg.model.hidden == 64);
  CHECK(cfg.solver.method == "dopri5");
  CHECK(cfg.solver.rtol == 1e-4);
  CHECK(cfg.sensitivity == "adjoint");
  CHECK(cfg.integral_loss.kind == "none");
  CHECK(cfg.optim.lr == 0.05);
  CHECK(cfg.optim.steps == 500);

  auto full = hz::parse_config(R"({
    "task": "density_gaussians", "seed": 9, "data_n": 256,
    "model": {"variant": "ffjord", "hidden": 24, "trace_samples": 4},
    "solver": {"method": "rk4", "rtol": 1e-3, "atol": 1e-5, "h_init": 0.125,
               "max_steps": 500, "s0": 0.0, "s1": 2.0},
    "sensitivity": "autograd",
    "integral_loss": {"kind": "kinetic", "weight": 0.25},
    "optim": {"lr": 0.01, "momentum": 0.8, "steps": 12, "batch_size": 32}
  })");
  CHECK(full.model.variant == "ffjord");
  CHECK(full.model.trace_samples == 4);
  CHECK(full.solver.method == "rk4");
  CHECK(full.solver.s1 == 2.0);
  CHECK(full.sensitivity == "autograd");
  CHECK(full.integral_loss.weight == 0.25);
  CHECK(full.optim.batch_size == 32);
}

TEST_CASE("config parsing rejects unknown keys, bad types, bad combinations") {
  expect_config_error(R"({"task": "classify_moons", "foo": 1})", "unknown config key 'foo'");
  expect_config_error(R"({"task": "classify_moons", "model": {"widht": 3}})",
                      "unknown config key 'model.widht'");
  expect_config_error(R"({"task": "classify_moons", "solver": {"tol": 1e-3}})",
                      "unknown config key 'solver.tol'");
  expect_config_error(R"({"task": "classify_moons", "optim": {"weight_decay": 0.1}})",
                      "unknown config key 'optim.weight_decay'");
  expect_config_error(R"({"seed": 1})", "missing required key 'task'");
  expect_config_error(R"({"task": "mnist"})", "unknown task 'mnist'");
  expect_config_error(R"({"task": "classify_moons", "seed": "abc"})",
                      "must be a non-negative integer");
  expect_config_error(R"({"task": "classify_moons", "seed": -4})",
                      "must be a non-negative integer");
  expect_config_error(R"({"task": "classify_moons", "solver": {"rtol": "tight"}})",
                      "must be a number");
  expect_config_error(R"({"task": "classify_moons", "model": 3})", "must be an object");
  expect_config_error("not json at all", "config is not valid JSON");
  expect_config_error("[1, 2]", "config root must be a JSON object");
  expect_config_error(R"({"task": "classify_moons", "model": {"variant": "resnet"}})",
                      "unknown model.variant 'resnet'");
  expect_config_error(R"({"task": "classify_moons", "model": {"variant": "cnf"}})",
                      "only applies to the density task");
  expect_config_error(R"({"task": "density_gaussians"})", "needs a flow variant");
  expect_config_error(R"({"task": "classify_moons", "model": {"variant": "anode"}})",
                      "needs model.augment_dims >= 1");
  expect_config_error(
      R"({"task": "classify_moons", "model": {"variant": "higher_order", "order": 3}})",
      "not divisible by model.order");
  expect_config_error(
      R"({"task": "classify_moons", "model": {"variant": "hamiltonian", "order": 2}})",
      "does not support model.order > 1");
  expect_config_error(R"({"task": "classify_moons", "sensitivity": "forward"})",
                      "unknown sensitivity 'forward'");
  expect_config_error(R"({"task": "classify_moons", "solver": {"method": "verlet"}})",
                      "solver.method");
  expect_config_error(R"({"task": "classify_moons", "solver": {"rtol": 0.0}})",
                      "tolerances must be positive");
  expect_config_error(R"({"task": "classify_moons", "solver": {"s0": 1.0, "s1": 0.5}})",
                      "needs s1 > s0");
  expect_config_error(R"({"task": "classify_moons", "solver": {"max_steps": 0}})",
                      "max_steps must be positive");
  expect_config_error(R"({"task": "classify_moons", "integral_loss": {"kind": "potential"}})",
                      "unknown integral_loss.kind");
  expect_config_error(R"({"task": "classify_moons", "integral_loss": {"weight": -1}})",
                      "must be non-negative");
  expect_config_error(R"({"task": "classify_moons", "optim": {"lr": 0}})",
                      "optim.lr must be positive");
  expect_config_error(R"({"task": "classify_moons", "optim": {"momentum": 1.0}})",
                      "momentum must lie in [0, 1)");
  expect_config_error(R"({"task": "classify_moons", "model": {"hidden": 0}})",
                      "model.hidden must be positive");
  expect_config_error(R"({"task": "classify_moons", "data_n": 0})", "data_n must be positive");
  expect_config_error(R"({"task": "classify_moons", "model": {"trace_samples": 0}})",
                      "trace_samples must be >= 1");

  CHECK_THROWS_AS(hz::load_config("no_such_config_file.json"), hz::ConfigError);
}

TEST_CASE("zero-step run reports the initial loss and writes artifacts") {
  auto cfg = hz::parse_config(R"({
    "task": "classify_moons", "seed": 1, "data_n": 64,
    "model": {"hidden": 8},
    "solver": {"method": "rk4", "h_init": 0.2},
    "optim": {"steps": 0}
  })");
  TmpDir dir("zero");
  hz::MetricsReport rep = hz::train(cfg, dir.str());
  CHECK(rep.losses.size() == 1);
  CHECK(std::isfinite(rep.losses[0]));
  CHECK(rep.metric_name == "accuracy");
  CHECK(rep.final_metric >= 0.0);
  CHECK(rep.final_metric <= 1.0);
  CHECK(rep.nfe_forward > 0.0);
  CHECK(rep.nfe_backward == 0.0);
  CHECK(fs::exists(dir.file("checkpoint.json")));
  CHECK(fs::exists(dir.file("metrics.json")));

  auto j = nlohmann::json::parse(read_file(dir.file("metrics.json")));
  CHECK(j["losses"].size() == 1);
  CHECK(j["metric_name"].get<std::string>() == "accuracy");
  CHECK(j["config"]["task"].get<std::string>() == "classify_moons");
  CHECK(j["config"]["optim"]["steps"].get<int>() == 0);
  CHECK(j.contains("nfe_forward"));
  CHECK(j.contains("wall_seconds"));
}

TEST_CASE("fixed-step training is bit-deterministic across runs") {
  const std::string text = R"({
    "task": "classify_moons", "seed": 11, "data_n": 96,
    "model": {"hidden": 8},
    "solver": {"method": "rk4", "h_init": 0.125},
    "optim": {"steps": 5}
  })";
  hz::MetricsReport r1 = hz::train(hz::parse_config(text), "");
  hz::MetricsReport r2 = hz::train(hz::parse_config(text), "");
  REQUIRE(r1.losses.size() == 6);
  REQUIRE(r2.losses.size() == 6);
  for (std::size_t i = 0; i < r1.losses.size(); ++i) {
    CHECK(r1.losses[i] == r2.losses[i]);
  }
  CHECK(r1.final_metric == r2.final_metric);
  CHECK(r1.nfe_forward == r2.nfe_forward);
  CHECK(r1.nfe_backward == r2.nfe_backward);
  // losses move: training does something
  CHECK(r1.losses.front() != r1.losses.back());
}

TEST_CASE("evaluate reproduces the trained model's metric from its checkpoint") {
  auto cfg = hz::parse_config(R"({
    "task": "classify_moons", "seed": 5, "data_n": 96,
    "model": {"hidden": 8},
    "solver": {"method": "rk4", "h_init": 0.125},
    "optim": {"steps": 4}
  })");
  TmpDir dir("eval");
  hz::MetricsReport trained = hz::train(cfg, dir.str());
  hz::MetricsReport eval = hz::evaluate(dir.file("checkpoint.json"), cfg);
  CHECK(eval.metric_name == trained.metric_name);
  CHECK(eval.final_metric == trained.final_metric);
  CHECK(eval.losses.size() == 1);
  CHECK(std::isfinite(eval.losses[0]));
}

TEST_CASE("density task: short flow training runs and evaluate matches bitwise") {
  auto cfg = hz::parse_config(R"({
    "task": "density_gaussians", "seed": 2, "data_n": 64,
    "model": {"variant": "cnf", "hidden": 8},
    "solver": {"method": "rk4", "h_init": 0.125},
    "optim": {"steps": 2, "lr": 0.01}
  })");
  TmpDir dir("dens");
  hz::MetricsReport trained = hz::train(cfg, dir.str());
  CHECK(trained.metric_name == "nll");
  CHECK(trained.losses.size() == 3);
  for (double l : trained.losses) CHECK(std::isfinite(l));
  hz::MetricsReport eval = hz::evaluate(dir.file("checkpoint.json"), cfg);
  CHECK(eval.final_metric == trained.final_metric);

  // the hutchinson variant trains the same way
  auto fj = hz::parse_config(R"({
    "task": "density_gaussians", "seed": 2, "data_n": 64,
    "model": {"variant": "ffjord", "hidden": 8, "trace_samples": 2},
    "solver": {"method": "rk4", "h_init": 0.125},
    "optim": {"steps": 2, "lr": 0.01}
  })");
  hz::MetricsReport fjr = hz::train(fj, "");
  CHECK(fjr.losses.size() == 3);
  for (double l : fjr.losses) CHECK(std::isfinite(l));
}

TEST_CASE("corrupted or mismatched checkpoints are rejected with a label") {
  auto cfg = hz::parse_config(R"({
    "task": "classify_moons", "seed": 3, "data_n": 64,
    "model": {"hidden": 8},
    "solver": {"method": "rk4", "h_init": 0.2},
    "optim": {"steps": 0}
  })");
  TmpDir dir("corrupt");
  hz::train(cfg, dir.str());

  {
    std::ofstream out(dir.file("mangled.json"));
    out << read_file(dir.file("checkpoint.json")).substr(0, 40);
  }
  try {
    hz::evaluate(dir.file("mangled.json"), cfg);
    FAIL("mangled checkpoint accepted");
  } catch (const hz::ConfigError& e) {
    CHECK(std::string(e.what()).rfind("checkpoint rejected: ", 0) == 0);
  }

  // structurally valid checkpoint for a different architecture
  auto other = cfg;
  other.model.hidden = 12;
  try {
    hz::evaluate(dir.file("checkpoint.json"), other);
    FAIL("mismatched checkpoint accepted");
  } catch (const hz::ConfigError& e) {
    CHECK(std::string(e.what()).rfind("checkpoint rejected: ", 0) == 0);
  }

  CHECK_THROWS_AS(hz::evaluate(dir.file("missing.json"), cfg), hz::ConfigError);
}

TEST_CASE("both sensitivity methods train to matching accuracy") {
  const std::string base = R"({
    "task": "classify_moons", "seed": 17, "data_n": 256,
    "model": {"variant": "depthcat", "hidden": 16},
    "solver": {"method": "rk4", "h_init": 0.1},
    "optim": {"steps": 40, "lr": 0.1},
    "sensitivity": ")";
  hz::MetricsReport adj = hz::train(hz::parse_config(base + "adjoint\"}"), "");
  hz::MetricsReport bpt = hz::train(hz::parse_config(base + "autograd\"}"), "");
  INFO("adjoint accuracy ", adj.final_metric, ", autograd accuracy ", bpt.final_metric);
  CHECK(adj.final_metric > 0.7);
  CHECK(bpt.final_metric > 0.7);
  CHECK(std::abs(adj.final_metric - bpt.final_metric) < 0.03);
  // the backward passes differ in kind: adjoint integrates, autograd replays
  CHECK(adj.nfe_backward > 0.0);
  CHECK(bpt.nfe_backward == 0.0);
}

TEST_CASE("kinetic regularization shrinks the field energy along trajectories") {
  const auto train_cfg = [](double w) {
    std::ostringstream os;
    os << R"({
      "task": "classify_moons", "seed": 23, "data_n": 128,
      "model": {"hidden": 16},
      "solver": {"method": "rk4", "h_init": 0.1},
      "optim": {"steps": 30, "lr": 0.1},
      "integral_loss": {"kind": "kinetic", "weight": )"
       << w << "}}";
    return hz::parse_config(os.str());
  };
  TmpDir plain_dir("kin0"), reg_dir("kin1");
  hz::MetricsReport plain = hz::train(train_cfg(0.0), plain_dir.str());
  hz::MetricsReport reg = hz::train(train_cfg(0.5), reg_dir.str());
  CHECK(plain.final_metric > 0.7);
  CHECK(reg.final_metric > 0.7);

  // Measure ∫ mean ||f||^2 ds of each trained field by differencing the
  // evaluation loss with and without a unit-weight kinetic term.
  const auto measure = [&](const std::string& ckpt) {
    auto with = train_cfg(1.0);
    auto without = train_cfg(0.0);
    const double lw = hz::evaluate(ckpt, with).losses[0];
    const double lo = hz::evaluate(ckpt, without).losses[0];
    return lw - lo;
  };
  const double energy_plain = measure(plain_dir.file("checkpoint.json"));
  const double energy_reg = measure(reg_dir.file("checkpoint.json"));
  INFO("unregularized energy ", energy_plain, ", regularized ", energy_reg);
  CHECK(energy_plain > 0.0);
  CHECK(energy_reg > 0.0);
  CHECK(energy_reg < energy_plain);
}

TEST_CASE("trajectory dump: one record per eval point plus a stats trailer") {
  auto cfg = hz::parse_config(R"({
    "task": "classify_moons", "seed": 4, "data_n": 32,
    "model": {"hidden": 8},
    "solver": {"method": "rk4", "h_init": 0.2},
    "optim": {"steps": 0}
  })");
  TmpDir dir("dump");
  hz::train(cfg, dir.str(), true);
  REQUIRE(fs::exists(dir.file("trajectory.jsonl")));
  std::ifstream in(dir.file("trajectory.jsonl"));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  REQUIRE(lines.size() == 51);  // 50 eval points + stats trailer
  auto first = nlohmann::json::parse(lines.front());
  CHECK(first["s"].get<double>() == 0.0);
  CHECK(first["z"].size() == 8);
  CHECK(first["z"][0].size() == 2);
  auto trailer = nlohmann::json::parse(lines.back());
  CHECK(trailer.contains("nfe"));
  CHECK(trailer.contains("accepted_steps"));
}

TEST_CASE("solver blowups surface as numeric errors with a saved checkpoint") {
  auto cfg = hz::parse_config(R"({
    "task": "classify_moons", "seed": 6, "data_n": 32,
    "model": {"hidden": 8},
    "solver": {"method": "dopri5", "rtol": 1e-12, "atol": 1e-14, "max_steps": 3},
    "optim": {"steps": 1}
  })");
  TmpDir dir("blowup");
  try {
    hz::train(cfg, dir.str());
    FAIL("expected a numeric error");
  } catch (const hz::NumericError& e) {
    CHECK(std::string(e.what()).rfind("solver failed on the initial loss: ", 0) == 0);
  }
  CHECK(fs::exists(dir.file("checkpoint.json")));  // last good parameters survive
}
