#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "continua/nn.hpp"
#include "continua/rng.hpp"
#include "continua/tensor.hpp"

namespace testsup {

inline bool close(double a, double b, double rtol, double atol = 0.0) {
  return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

// Central finite difference of scalar(eval) in one coordinate of a leaf
// parameter, mutating it in place and restoring it afterwards.
inline double fd_coord(const std::function<double()>& eval, continua::Tensor param,
                       std::size_t flat_index, double h = 1e-5) {
  std::vector<double>& d = param.mutable_data();
  const double saved = d[flat_index];
  d[flat_index] = saved + h;
  const double up = eval();
  d[flat_index] = saved - h;
  const double down = eval();
  d[flat_index] = saved;
  return (up - down) / (2.0 * h);
}

// Full finite-difference gradient for every element of a leaf tensor.
inline std::vector<double> fd_grad(const std::function<double()>& eval, continua::Tensor param,
                                   double h = 1e-5) {
  std::vector<double> g(param.numel());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = fd_coord(eval, param, i, h);
  return g;
}

inline std::shared_ptr<continua::nn::Sequential> make_mlp(std::size_t in, std::size_t hidden,
                                                          std::size_t out, continua::Rng& rng) {
  return std::make_shared<continua::nn::Sequential>(std::vector<continua::nn::LayerPtr>{
      std::make_shared<continua::nn::Linear>(in, hidden, rng),
      std::make_shared<continua::nn::Tanh>(),
      std::make_shared<continua::nn::Linear>(hidden, out, rng)});
}

}  // namespace testsup
