#pragma once

#include <cstdint>
#include <string>

#include "continua/tensor.hpp"

namespace continua::datasets {

struct Dataset {
  Tensor inputs;   // [n x d]
  Tensor targets;  // [n] class labels or [n x k] regression targets; empty when unsupervised
  bool has_targets = false;
};

/// Synthetic tasks, bit-deterministic under (task, n, seed):
///  - classify_moons / classify_circles: 2-d points, binary labels
///  - density_gaussians: ring of 8 Gaussians, no labels
///  - oscillator_regression: (q0, v0) -> q(T) of the unit harmonic
///    oscillator, T = 1: target = cos(T) q0 + sin(T) v0, noise-free
Dataset generate(const std::string& task, std::size_t n, std::uint64_t seed);

bool task_known(const std::string& task);
std::string known_tasks();

}  // namespace continua::datasets
