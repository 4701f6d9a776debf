#include "continua/datasets.hpp"

#include <cmath>
#include <vector>

#include "continua/rng.hpp"

namespace continua::datasets {

namespace {

constexpr double kPi = 3.14159265358979323846;

Dataset make_moons(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x6d6f6f6e));
  std::vector<double> x(n * 2), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double t = rng.uniform(0.0, kPi);
    double px, py;
    if (label == 0) {
      px = std::cos(t);
      py = std::sin(t);
    } else {
      px = 1.0 - std::cos(t);
      py = 0.5 - std::sin(t);
    }
    x[i * 2 + 0] = px + 0.1 * rng.normal();
    x[i * 2 + 1] = py + 0.1 * rng.normal();
    y[i] = static_cast<double>(label);
  }
  return {Tensor::from_data({n, 2}, std::move(x)), Tensor::from_data({n}, std::move(y)), true};
}

Dataset make_circles(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x63697263));
  std::vector<double> x(n * 2), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double r = label == 0 ? 1.0 : 0.5;
    const double t = rng.uniform(0.0, 2.0 * kPi);
    x[i * 2 + 0] = r * std::cos(t) + 0.05 * rng.normal();
    x[i * 2 + 1] = r * std::sin(t) + 0.05 * rng.normal();
    y[i] = static_cast<double>(label);
  }
  return {Tensor::from_data({n, 2}, std::move(x)), Tensor::from_data({n}, std::move(y)), true};
}

Dataset make_gaussians(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x67617573));
  std::vector<double> x(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % 8;
    const double a = 2.0 * kPi * static_cast<double>(k) / 8.0;
    x[i * 2 + 0] = 2.0 * std::cos(a) + 0.3 * rng.normal();
    x[i * 2 + 1] = 2.0 * std::sin(a) + 0.3 * rng.normal();
  }
  return {Tensor::from_data({n, 2}, std::move(x)), Tensor(), false};
}

Dataset make_oscillator(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x6f736369));
  const double T = 1.0;
  std::vector<double> x(n * 2), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double q0 = rng.uniform(-1.0, 1.0);
    const double v0 = rng.uniform(-1.0, 1.0);
    x[i * 2 + 0] = q0;
    x[i * 2 + 1] = v0;
    y[i] = std::cos(T) * q0 + std::sin(T) * v0;
  }
  return {Tensor::from_data({n, 2}, std::move(x)), Tensor::from_data({n, 1}, std::move(y)), true};
}

}  // namespace

bool task_known(const std::string& task) {
  return task == "classify_moons" || task == "classify_circles" ||
         task == "density_gaussians" || task == "oscillator_regression";
}

std::string known_tasks() {
  return "classify_moons, classify_circles, density_gaussians, oscillator_regression";
}

Dataset generate(const std::string& task, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error("dataset size must be positive");
  if (task == "classify_moons") return make_moons(n, seed);
  if (task == "classify_circles") return make_circles(n, seed);
  if (task == "density_gaussians") return make_gaussians(n, seed);
  if (task == "oscillator_regression") return make_oscillator(n, seed);
  throw Error("unknown task '" + task + "' (known tasks: " + known_tasks() + ")");
}

}  // namespace continua::datasets
