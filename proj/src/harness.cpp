#include "continua/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "continua/autograd.hpp"
#include "continua/datasets.hpp"
#include "continua/models.hpp"
#include "continua/nn.hpp"
#include "continua/odeint.hpp"
#include "continua/rng.hpp"
#include "continua/sensitivity.hpp"

namespace continua::harness {

namespace {

using nlohmann::json;

constexpr double kLog2Pi = 1.8378770664093454836;

enum class TaskKind { classification, regression, density };

TaskKind task_kind(const std::string& task) {
  if (task == "classify_moons" || task == "classify_circles") return TaskKind::classification;
  if (task == "oscillator_regression") return TaskKind::regression;
  return TaskKind::density;
}

bool variant_known(const std::string& v) {
  return v == "vanilla" || v == "depthcat" || v == "anode" || v == "higher_order" ||
         v == "galerkin" || v == "hamiltonian" || v == "stable" || v == "cnf" || v == "ffjord";
}

void validate(const ExperimentConfig& cfg) {
  if (!datasets::task_known(cfg.task)) {
    throw ConfigError("unknown task '" + cfg.task + "' (known tasks: " + datasets::known_tasks() +
                      ")");
  }
  if (cfg.data_n == 0) throw ConfigError("data_n must be positive");
  const ModelSpec& m = cfg.model;
  if (!variant_known(m.variant)) {
    throw ConfigError("unknown model.variant '" + m.variant +
                      "' (expected vanilla, depthcat, anode, higher_order, galerkin, "
                      "hamiltonian, stable, cnf or ffjord)");
  }
  const bool flow = m.variant == "cnf" || m.variant == "ffjord";
  const TaskKind kind = task_kind(cfg.task);
  if (flow && kind != TaskKind::density) {
    throw ConfigError("model.variant '" + m.variant + "' only applies to the density task");
  }
  if (!flow && kind == TaskKind::density) {
    throw ConfigError("task '" + cfg.task + "' needs a flow variant (cnf or ffjord)");
  }
  if (m.hidden == 0) throw ConfigError("model.hidden must be positive");
  if (m.order == 0) throw ConfigError("model.order must be >= 1");
  const std::size_t D = 2 + m.augment_dims;
  if (D % m.order != 0) {
    throw ConfigError("state dimension " + std::to_string(D) +
                      " (2 data dims + model.augment_dims) is not divisible by model.order " +
                      std::to_string(m.order));
  }
  if (m.variant == "anode" && m.augment_dims == 0) {
    throw ConfigError("model.variant 'anode' needs model.augment_dims >= 1");
  }
  if (m.variant == "hamiltonian" && D % 2 != 0) {
    throw ConfigError("model.variant 'hamiltonian' needs an even state dimension");
  }
  if ((m.variant == "hamiltonian" || m.variant == "stable" || flow) && m.order != 1) {
    throw ConfigError("model.variant '" + m.variant + "' does not support model.order > 1");
  }
  if (m.trace_samples == 0) throw ConfigError("model.trace_samples must be >= 1");
  if (cfg.sensitivity != "autograd" && cfg.sensitivity != "adjoint") {
    throw ConfigError("unknown sensitivity '" + cfg.sensitivity +
                      "' (expected autograd or adjoint)");
  }
  try {
    odeint::method_from_string(cfg.solver.method);
  } catch (const Error& e) {
    throw ConfigError(std::string("solver.method: ") + e.what());
  }
  if (!(cfg.solver.rtol > 0.0) || !(cfg.solver.atol > 0.0)) {
    throw ConfigError("solver tolerances must be positive");
  }
  if (!(cfg.solver.s1 > cfg.solver.s0)) {
    throw ConfigError("solver span needs s1 > s0");
  }
  if (cfg.solver.max_steps == 0) throw ConfigError("solver.max_steps must be positive");
  if (cfg.solver.h_init < 0.0) throw ConfigError("solver.h_init must be non-negative");
  if (cfg.integral_loss.kind != "none" && cfg.integral_loss.kind != "kinetic") {
    throw ConfigError("unknown integral_loss.kind '" + cfg.integral_loss.kind +
                      "' (expected none or kinetic)");
  }
  if (cfg.integral_loss.weight < 0.0) {
    throw ConfigError("integral_loss.weight must be non-negative");
  }
  if (!(cfg.optim.lr > 0.0)) throw ConfigError("optim.lr must be positive");
  if (!(cfg.optim.momentum >= 0.0 && cfg.optim.momentum < 1.0)) {
    throw ConfigError("optim.momentum must lie in [0, 1)");
  }
}

// --- config JSON -------------------------------------------------------------

void expect_keys(const json& obj, const std::string& path,
                 std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) {
      if (it.key() == a) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      const std::string full = path.empty() ? it.key() : path + "." + it.key();
      throw ConfigError("unknown config key '" + full + "'");
    }
  }
}

const json& get_object(const json& obj, const std::string& path, const char* key) {
  const json& v = obj.at(key);
  if (!v.is_object()) {
    throw ConfigError("config key '" + (path.empty() ? key : path + "." + key) +
                      "' must be an object");
  }
  return v;
}

double get_number(const json& obj, const std::string& path, const char* key, double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) {
    throw ConfigError("config key '" + (path.empty() ? key : path + "." + key) +
                      "' must be a number");
  }
  return v.get<double>();
}

std::uint64_t get_uint(const json& obj, const std::string& path, const char* key,
                       std::uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  const std::string full = path.empty() ? key : path + "." + key;
  if (!v.is_number_integer() && !v.is_number_unsigned()) {
    throw ConfigError("config key '" + full + "' must be a non-negative integer");
  }
  if (v.is_number_integer() && v.get<std::int64_t>() < 0) {
    throw ConfigError("config key '" + full + "' must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

std::string get_string(const json& obj, const std::string& path, const char* key,
                       const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) {
    throw ConfigError("config key '" + (path.empty() ? key : path + "." + key) +
                      "' must be a string");
  }
  return v.get<std::string>();
}

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["task"] = cfg.task;
  j["seed"] = cfg.seed;
  j["data_n"] = cfg.data_n;
  j["model"] = {{"variant", cfg.model.variant},
                {"hidden", cfg.model.hidden},
                {"augment_dims", cfg.model.augment_dims},
                {"order", cfg.model.order},
                {"basis_terms", cfg.model.basis_terms},
                {"trace_samples", cfg.model.trace_samples}};
  j["solver"] = {{"method", cfg.solver.method}, {"rtol", cfg.solver.rtol},
                 {"atol", cfg.solver.atol},     {"h_init", cfg.solver.h_init},
                 {"max_steps", cfg.solver.max_steps}, {"s0", cfg.solver.s0},
                 {"s1", cfg.solver.s1}};
  j["sensitivity"] = cfg.sensitivity;
  j["integral_loss"] = {{"kind", cfg.integral_loss.kind}, {"weight", cfg.integral_loss.weight}};
  j["optim"] = {{"lr", cfg.optim.lr},
                {"momentum", cfg.optim.momentum},
                {"steps", cfg.optim.steps},
                {"batch_size", cfg.optim.batch_size}};
  return j;
}

// --- model construction ------------------------------------------------------

struct Built {
  models::DEFunc func;
  nn::LayerPtr head;  // null for density
  std::shared_ptr<nn::Sequential> holder;
  odeint::DepthSpan span;
  odeint::SolverConfig solver;
  models::SensitivityMethod sens;
  TaskKind kind;
  std::size_t dim;  // state columns without the accumulator
};

Built build(const ExperimentConfig& cfg) {
  validate(cfg);
  const ModelSpec& m = cfg.model;
  const TaskKind kind = task_kind(cfg.task);
  const std::size_t D = 2 + m.augment_dims;
  const std::size_t out = D / m.order;
  Rng init(derive_seed(cfg.seed, 3));

  nn::LayerPtr field;
  models::Divergence div = models::Divergence::none;
  if (m.variant == "vanilla" || m.variant == "anode" || m.variant == "higher_order") {
    field = std::make_shared<nn::Sequential>(std::vector<nn::LayerPtr>{
        std::make_shared<nn::Linear>(D, m.hidden, init), std::make_shared<nn::Tanh>(),
        std::make_shared<nn::Linear>(m.hidden, out, init)});
  } else if (m.variant == "depthcat") {
    field = std::make_shared<nn::Sequential>(std::vector<nn::LayerPtr>{
        std::make_shared<nn::DepthCat>(), std::make_shared<nn::Linear>(D + 1, m.hidden, init),
        std::make_shared<nn::Tanh>(), std::make_shared<nn::Linear>(m.hidden, out, init)});
  } else if (m.variant == "galerkin") {
    nn::FourierBasis basis{m.basis_terms, cfg.solver.s1 - cfg.solver.s0};
    field = std::make_shared<nn::Sequential>(std::vector<nn::LayerPtr>{
        std::make_shared<nn::GalLinear>(D, m.hidden, basis, init), std::make_shared<nn::Tanh>(),
        std::make_shared<nn::GalLinear>(m.hidden, out, basis, init)});
  } else if (m.variant == "hamiltonian" || m.variant == "stable") {
    auto scalar_net = std::make_shared<nn::Sequential>(std::vector<nn::LayerPtr>{
        std::make_shared<nn::Linear>(D, m.hidden, init), std::make_shared<nn::Tanh>(),
        std::make_shared<nn::Linear>(m.hidden, 1, init)});
    const auto ekind = m.variant == "hamiltonian" ? models::EnergyField::Kind::hamiltonian
                                                  : models::EnergyField::Kind::stable;
    field = std::make_shared<models::EnergyField>(ekind, scalar_net);
  } else {  // cnf | ffjord
    field = std::make_shared<nn::Sequential>(std::vector<nn::LayerPtr>{
        std::make_shared<nn::Linear>(D, m.hidden, init), std::make_shared<nn::Tanh>(),
        std::make_shared<nn::Linear>(m.hidden, D, init)});
    div = m.variant == "cnf" ? models::Divergence::exact : models::Divergence::hutchinson;
  }

  nn::LayerPtr head;
  if (kind == TaskKind::classification) {
    head = std::make_shared<nn::Linear>(D, 2, init);
  } else if (kind == TaskKind::regression) {
    head = std::make_shared<nn::Linear>(D, 1, init);
  }

  auto holder = std::make_shared<nn::Sequential>();
  holder->append(field);
  if (head) holder->append(head);

  odeint::SolverConfig solver;
  solver.method = odeint::method_from_string(cfg.solver.method);
  solver.rtol = cfg.solver.rtol;
  solver.atol = cfg.solver.atol;
  solver.h_init = cfg.solver.h_init;
  solver.max_steps = cfg.solver.max_steps;
  if (kind == TaskKind::density) solver.error_ignore_trailing = 1;

  return Built{models::DEFunc(field, m.order, m.augment_dims, div, m.trace_samples),
               head,
               holder,
               odeint::DepthSpan{cfg.solver.s0, cfg.solver.s1},
               solver,
               models::sensitivity_from_string(cfg.sensitivity),
               kind,
               D};
}

// --- loss pieces -------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const Tensor& onehot) {
  const std::size_t B = logits.extent(0), k = logits.extent(1);
  std::vector<double> sh(B * k);
  for (std::size_t b = 0; b < B; ++b) {
    double mx = logits.at(b, 0);
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits.at(b, c));
    for (std::size_t c = 0; c < k; ++c) sh[b * k + c] = mx;
  }
  Tensor shifted = sub(logits, Tensor::from_data({B, k}, std::move(sh)));
  Tensor lse = log(sum(exp(shifted), 1));
  Tensor picked = sum(mul(shifted, onehot), 1);
  return mean(sub(lse, picked));
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  if (t.rank() == 1) {
    std::vector<double> d(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) d[i] = t.at(idx[i]);
    return Tensor::from_data({idx.size()}, std::move(d));
  }
  const std::size_t c = t.extent(1);
  std::vector<double> d(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < c; ++j) d[i * c + j] = t.at(idx[i], j);
  }
  return Tensor::from_data({idx.size(), c}, std::move(d));
}

Tensor one_hot(const Tensor& labels, const std::vector<std::size_t>& idx, std::size_t k) {
  std::vector<double> d(idx.size() * k, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto cls = static_cast<std::size_t>(labels.at(idx[i]));
    if (cls >= k) throw Error("label out of range");
    d[i * k + cls] = 1.0;
  }
  return Tensor::from_data({idx.size(), k}, std::move(d));
}

sensitivity::TerminalLoss make_terminal(const Built& b, const datasets::Dataset& data,
                                        const std::vector<std::size_t>& idx) {
  const double s1 = b.span.s1;
  if (b.kind == TaskKind::classification) {
    Tensor onehot = one_hot(data.targets, idx, 2);
    nn::LayerPtr head = b.head;
    return {[head, s1, onehot](const Tensor& z1) {
      return cross_entropy(head->forward(s1, z1), onehot);
    }};
  }
  if (b.kind == TaskKind::regression) {
    Tensor ty = gather_rows(data.targets, idx);
    nn::LayerPtr head = b.head;
    return {[head, s1, ty](const Tensor& z1) {
      return mean(square(sub(head->forward(s1, z1), ty)));
    }};
  }
  const std::size_t D = b.dim;
  return {[D](const Tensor& z1ext) {
    const std::size_t B = z1ext.extent(0);
    Tensor core = slice_cols(z1ext, 0, D);
    Tensor acc = reshape(slice_cols(z1ext, D, D + 1), {B});
    Tensor log_base = add(mul(sum(square(core), 1), Tensor::scalar(-0.5)),
                          Tensor::scalar(-0.5 * static_cast<double>(D) * kLog2Pi));
    return neg(mean(sub(log_base, acc)));
  }};
}

std::optional<sensitivity::IntegralLoss> make_integral(const Built& b,
                                                       const ExperimentConfig& cfg) {
  if (cfg.integral_loss.kind != "kinetic" || cfg.integral_loss.weight == 0.0) return {};
  const bool density = b.kind == TaskKind::density;
  const std::size_t D = b.dim;
  const double w = cfg.integral_loss.weight;
  odeint::VectorField core = b.func.core_field();
  sensitivity::IntegralLoss loss;
  loss.integrand = [core, density, D, w](double s, const Tensor& z) {
    Tensor zc = density ? slice_cols(z, 0, D) : z;
    return mul(sum(square(core(s, zc)), 1), Tensor::scalar(w));
  };
  loss.reduction = sensitivity::IntegralLoss::Reduction::mean;
  return loss;
}

odeint::VectorField make_field(const Built& b, std::size_t batch_rows, Rng& hutch) {
  if (b.func.divergence() == models::Divergence::hutchinson) {
    std::vector<Tensor> noise;
    noise.reserve(b.func.trace_samples());
    for (std::size_t j = 0; j < b.func.trace_samples(); ++j) {
      noise.push_back(rand_rademacher(hutch, {batch_rows, b.dim}));
    }
    return b.func.as_field_fixed_noise(std::move(noise));
  }
  return b.func.as_field();
}

// Values-only loss of the current parameters on the given batch.
double loss_value(const Built& b, const odeint::VectorField& field, const Tensor& z0,
                  const sensitivity::TerminalLoss& terminal,
                  const std::optional<sensitivity::IntegralLoss>& integral,
                  odeint::SolveStats& stats_out) {
  autograd::NoGradGuard off;
  if (!integral) {
    auto [z1, stats] = odeint::solve_terminal(field, z0, b.span, b.solver);
    stats_out += stats;
    return terminal.fn(z1).value();
  }
  odeint::Solution sol = odeint::solve(field, z0, b.span, b.solver);
  stats_out += sol.stats;
  const double term = terminal.fn(sol.terminal()).value();
  double acc = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < sol.states.size(); ++i) {
    Tensor r = integral->integrand(sol.depths[i], sol.states[i]);
    const double rv = (integral->reduction == sensitivity::IntegralLoss::Reduction::mean
                           ? mean(r)
                           : sum(r))
                          .value();
    if (i > 0) acc += 0.5 * (prev + rv) * (sol.depths[i] - sol.depths[i - 1]);
    prev = rv;
  }
  return term + acc;
}

double compute_metric(const Built& b, const datasets::Dataset& eval_set, std::uint64_t seed,
                      odeint::SolveStats& stats_out) {
  autograd::NoGradGuard off;
  if (b.kind == TaskKind::density) {
    models::CNF cnf(b.func, 2, b.span, b.solver);
    Rng noise(derive_seed(seed, 6));
    Tensor lp = cnf.log_prob(eval_set.inputs, noise);
    stats_out += cnf.last_stats();
    return neg(mean(lp)).value();
  }
  Tensor z0 = b.func.pack(eval_set.inputs);
  auto [z1, stats] = odeint::solve_terminal(b.func.as_field(), z0, b.span, b.solver);
  stats_out += stats;
  Tensor out = b.head->forward(b.span.s1, z1);
  if (b.kind == TaskKind::regression) {
    return mean(square(sub(out, eval_set.targets))).value();
  }
  const std::size_t n = out.extent(0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int pred = out.at(i, 1) > out.at(i, 0) ? 1 : 0;
    if (pred == static_cast<int>(eval_set.targets.at(i))) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

const char* metric_name_for(TaskKind kind) {
  switch (kind) {
    case TaskKind::classification: return "accuracy";
    case TaskKind::regression: return "mse";
    case TaskKind::density: return "nll";
  }
  return "";
}

// Epoch-based minibatch order; the full-batch case stays permutation-free so
// fixed-step runs are bit-identical regardless of the shuffle stream.
class Batcher {
 public:
  Batcher(std::size_t n, std::size_t bs, std::uint64_t seed)
      : n_(n), bs_(bs), rng_(seed), perm_(n) {
    for (std::size_t i = 0; i < n; ++i) perm_[i] = i;
    cursor_ = n;  // force a shuffle before the first minibatch
  }

  std::vector<std::size_t> next() {
    if (bs_ >= n_) return perm_;
    if (cursor_ + bs_ > n_) {
      rng_.shuffle(perm_);
      cursor_ = 0;
    }
    std::vector<std::size_t> idx(perm_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 perm_.begin() + static_cast<std::ptrdiff_t>(cursor_ + bs_));
    cursor_ += bs_;
    return idx;
  }

 private:
  std::size_t n_, bs_, cursor_;
  Rng rng_;
  std::vector<std::size_t> perm_;
};

void sgd_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                std::vector<std::vector<double>>& vel, double lr, double mu) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double>& p = params[i].mutable_data();
    const std::vector<double>& g = grads[i].data();
    auto& v = vel[i];
    for (std::size_t j = 0; j < params[i].numel(); ++j) {
      v[j] = mu * v[j] + g[j];
      p[j] -= lr * v[j];
    }
  }
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  expect_keys(j, "", {"task", "seed", "data_n", "model", "solver", "sensitivity",
                      "integral_loss", "optim"});
  if (!j.contains("task")) throw ConfigError("config is missing required key 'task'");

  ExperimentConfig cfg;
  cfg.task = get_string(j, "", "task", "");
  cfg.seed = get_uint(j, "", "seed", cfg.seed);
  cfg.data_n = static_cast<std::size_t>(get_uint(j, "", "data_n", cfg.data_n));
  if (j.contains("model")) {
    const json& m = get_object(j, "", "model");
    expect_keys(m, "model",
                {"variant", "hidden", "augment_dims", "order", "basis_terms", "trace_samples"});
    cfg.model.variant = get_string(m, "model", "variant", cfg.model.variant);
    cfg.model.hidden = static_cast<std::size_t>(get_uint(m, "model", "hidden", cfg.model.hidden));
    cfg.model.augment_dims =
        static_cast<std::size_t>(get_uint(m, "model", "augment_dims", cfg.model.augment_dims));
    cfg.model.order = static_cast<std::size_t>(get_uint(m, "model", "order", cfg.model.order));
    cfg.model.basis_terms =
        static_cast<std::size_t>(get_uint(m, "model", "basis_terms", cfg.model.basis_terms));
    cfg.model.trace_samples =
        static_cast<std::size_t>(get_uint(m, "model", "trace_samples", cfg.model.trace_samples));
  }
  if (j.contains("solver")) {
    const json& s = get_object(j, "", "solver");
    expect_keys(s, "solver", {"method", "rtol", "atol", "h_init", "max_steps", "s0", "s1"});
    cfg.solver.method = get_string(s, "solver", "method", cfg.solver.method);
    cfg.solver.rtol = get_number(s, "solver", "rtol", cfg.solver.rtol);
    cfg.solver.atol = get_number(s, "solver", "atol", cfg.solver.atol);
    cfg.solver.h_init = get_number(s, "solver", "h_init", cfg.solver.h_init);
    cfg.solver.max_steps =
        static_cast<std::size_t>(get_uint(s, "solver", "max_steps", cfg.solver.max_steps));
    cfg.solver.s0 = get_number(s, "solver", "s0", cfg.solver.s0);
    cfg.solver.s1 = get_number(s, "solver", "s1", cfg.solver.s1);
  }
  cfg.sensitivity = get_string(j, "", "sensitivity", cfg.sensitivity);
  if (j.contains("integral_loss")) {
    const json& il = get_object(j, "", "integral_loss");
    expect_keys(il, "integral_loss", {"kind", "weight"});
    cfg.integral_loss.kind = get_string(il, "integral_loss", "kind", cfg.integral_loss.kind);
    cfg.integral_loss.weight =
        get_number(il, "integral_loss", "weight", cfg.integral_loss.weight);
  }
  if (j.contains("optim")) {
    const json& o = get_object(j, "", "optim");
    expect_keys(o, "optim", {"lr", "momentum", "steps", "batch_size"});
    cfg.optim.lr = get_number(o, "optim", "lr", cfg.optim.lr);
    cfg.optim.momentum = get_number(o, "optim", "momentum", cfg.optim.momentum);
    cfg.optim.steps = static_cast<std::size_t>(get_uint(o, "optim", "steps", cfg.optim.steps));
    cfg.optim.batch_size =
        static_cast<std::size_t>(get_uint(o, "optim", "batch_size", cfg.optim.batch_size));
  }
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string MetricsReport::to_json() const {
  json j;
  j["losses"] = losses;
  j["final_metric"] = final_metric;
  j["metric_name"] = metric_name;
  j["nfe_forward"] = nfe_forward;
  j["nfe_backward"] = nfe_backward;
  j["wall_seconds"] = wall_seconds;
  j["config"] = config_echo.empty() ? json::object() : json::parse(config_echo);
  return j.dump(2);
}

MetricsReport train(const ExperimentConfig& cfg, const std::string& out_dir,
                    bool dump_trajectory) {
  const auto t_start = std::chrono::steady_clock::now();
  Built b = build(cfg);
  datasets::Dataset data = datasets::generate(cfg.task, cfg.data_n, derive_seed(cfg.seed, 1));
  datasets::Dataset eval_set = datasets::generate(cfg.task, cfg.data_n, derive_seed(cfg.seed, 2));
  Rng hutch(derive_seed(cfg.seed, 5));
  const std::size_t n = cfg.data_n;
  const std::size_t bs = cfg.optim.batch_size == 0 ? n : std::min(cfg.optim.batch_size, n);
  Batcher batcher(n, bs, derive_seed(cfg.seed, 4));

  MetricsReport rep;
  rep.metric_name = metric_name_for(b.kind);
  rep.config_echo = config_to_json(cfg).dump();

  std::vector<Tensor> params = b.holder->params();
  std::vector<std::vector<double>> vel(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) vel[i].assign(params[i].numel(), 0.0);

  const auto save_to = [&](const std::string& dir) {
    std::filesystem::create_directories(dir);
    nn::save_checkpoint(*b.holder, dir + "/checkpoint.json");
  };

  // Initial loss over the full training set; also the whole report when
  // optim.steps is zero.
  {
    const std::vector<std::size_t> idx = all_indices(n);
    odeint::VectorField field = make_field(b, n, hutch);
    Tensor z0 = b.func.pack(data.inputs);
    sensitivity::TerminalLoss terminal = make_terminal(b, data, idx);
    auto integral = make_integral(b, cfg);
    double init_loss;
    odeint::SolveStats istats;
    try {
      init_loss = loss_value(b, field, z0, terminal, integral, istats);
    } catch (const odeint::SolveError& e) {
      if (!out_dir.empty()) save_to(out_dir);
      throw NumericError(std::string("solver failed on the initial loss: ") + e.what());
    }
    rep.nfe_forward += static_cast<double>(istats.nfe);
    rep.losses.push_back(init_loss);
    if (!std::isfinite(init_loss)) {
      if (!out_dir.empty()) save_to(out_dir);
      throw NumericError("initial loss is not finite");
    }
  }

  Tensor last_good = nn::flatten_params(*b.holder);

  for (std::size_t step = 1; step <= cfg.optim.steps; ++step) {
    const std::vector<std::size_t> idx = batcher.next();
    Tensor bx = gather_rows(data.inputs, idx);
    odeint::VectorField field = make_field(b, idx.size(), hutch);
    Tensor z0 = b.func.pack(bx);
    sensitivity::TerminalLoss terminal = make_terminal(b, data, idx);
    auto integral = make_integral(b, cfg);
    sensitivity::ParamField pf{field, params};

    sensitivity::GradResult res;
    try {
      res = b.sens == models::SensitivityMethod::autograd
                ? sensitivity::grad_backprop(pf, z0, b.span, b.solver, terminal, integral)
                : sensitivity::grad_adjoint(pf, z0, b.span, b.solver, terminal, integral);
    } catch (const odeint::SolveError& e) {
      nn::unflatten_params(*b.holder, last_good);
      if (!out_dir.empty()) save_to(out_dir);
      throw NumericError("solver failed at step " + std::to_string(step) + ": " + e.what());
    }
    rep.nfe_forward += static_cast<double>(res.forward_stats.nfe);
    rep.nfe_backward += static_cast<double>(res.backward_stats.nfe);
    if (!std::isfinite(res.loss)) {
      nn::unflatten_params(*b.holder, last_good);
      if (!out_dir.empty()) save_to(out_dir);
      throw NumericError("non-finite loss at step " + std::to_string(step));
    }
    last_good = nn::flatten_params(*b.holder);
    sgd_update(params, res.param_grads, vel, cfg.optim.lr, cfg.optim.momentum);
    rep.losses.push_back(res.loss);
  }

  {
    odeint::SolveStats mstats;
    rep.final_metric = compute_metric(b, eval_set, cfg.seed, mstats);
    rep.nfe_forward += static_cast<double>(mstats.nfe);
  }

  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  if (!out_dir.empty()) {
    save_to(out_dir);
    write_text(out_dir + "/metrics.json", rep.to_json());
    if (dump_trajectory) {
      autograd::NoGradGuard off;
      const std::size_t rows = std::min<std::size_t>(8, n);
      Tensor z0 = b.func.pack(gather_rows(data.inputs, all_indices(rows)));
      std::vector<double> pts(50);
      for (std::size_t i = 0; i < pts.size(); ++i) {
        pts[i] = b.span.s0 + (b.span.s1 - b.span.s0) * static_cast<double>(i) /
                                 static_cast<double>(pts.size() - 1);
      }
      odeint::Trajectory traj =
          odeint::trajectory_eval(b.func.as_field(), z0, pts, b.solver);
      odeint::dump_trajectory(traj, out_dir + "/trajectory.jsonl");
    }
  }
  return rep;
}

MetricsReport evaluate(const std::string& checkpoint_path, const ExperimentConfig& cfg) {
  const auto t_start = std::chrono::steady_clock::now();
  Built b = build(cfg);
  try {
    nn::load_checkpoint(*b.holder, checkpoint_path);
  } catch (const Error& e) {
    throw ConfigError(std::string("checkpoint rejected: ") + e.what());
  }
  datasets::Dataset data = datasets::generate(cfg.task, cfg.data_n, derive_seed(cfg.seed, 1));
  datasets::Dataset eval_set = datasets::generate(cfg.task, cfg.data_n, derive_seed(cfg.seed, 2));
  Rng hutch(derive_seed(cfg.seed, 5));

  MetricsReport rep;
  rep.metric_name = metric_name_for(b.kind);
  rep.config_echo = config_to_json(cfg).dump();

  const std::vector<std::size_t> idx = all_indices(cfg.data_n);
  odeint::VectorField field = make_field(b, cfg.data_n, hutch);
  Tensor z0 = b.func.pack(data.inputs);
  sensitivity::TerminalLoss terminal = make_terminal(b, data, idx);
  auto integral = make_integral(b, cfg);
  odeint::SolveStats lstats;
  try {
    rep.losses.push_back(loss_value(b, field, z0, terminal, integral, lstats));
  } catch (const odeint::SolveError& e) {
    throw NumericError(std::string("solver failed during evaluation: ") + e.what());
  }
  rep.nfe_forward += static_cast<double>(lstats.nfe);

  odeint::SolveStats mstats;
  rep.final_metric = compute_metric(b, eval_set, cfg.seed, mstats);
  rep.nfe_forward += static_cast<double>(mstats.nfe);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return rep;
}

}  // namespace continua::harness
