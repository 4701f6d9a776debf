#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "continua/odeint.hpp"
#include "continua/tensor.hpp"

namespace continua::sensitivity {

/// A vector field together with the leaf parameters it closes over. The
/// parameter list fixes the gradient ordering for both methods.
struct ParamField {
  odeint::VectorField f;
  std::vector<Tensor> params;
};

/// Scalar loss on the terminal state. The callable may involve additional
/// trainable leaves (a readout head); their gradients are harvested too.
struct TerminalLoss {
  std::function<Tensor(const Tensor& z1)> fn;
};

/// Loss integrated over the whole depth span: per-batch integrand reduced to
/// a scalar rate, then integrated in s.
struct IntegralLoss {
  enum class Reduction { mean, sum };

  std::function<Tensor(double s, const Tensor& z)> integrand;  // -> [B] or [B x 1]
  Reduction reduction = Reduction::mean;
};

struct GradResult {
  double loss = 0.0;
  std::vector<Tensor> param_grads;  // aligned with ParamField::params
  Tensor input_grad;                // d loss / d z0
  odeint::SolveStats forward_stats;
  odeint::SolveStats backward_stats;  // adjoint only; zero for backprop
};

/// Differentiates the discretized solution: the solver's arithmetic is
/// recorded and reversed, so gradients are exact for the computation that
/// actually ran (step sizes treated as constants). Integral losses are
/// discretized by the trapezoidal rule on the recorded step depths.
GradResult grad_backprop(const ParamField& field, const Tensor& z0, odeint::DepthSpan span,
                         const odeint::SolverConfig& cfg,
                         const std::optional<TerminalLoss>& terminal,
                         const std::optional<IntegralLoss>& integral = {});

/// Continuous adjoint: the forward pass keeps values only; the backward pass
/// integrates state, adjoint and parameter accumulator jointly, rebuilding a
/// one-step local graph per field evaluation and discarding it. Retained
/// graph memory is therefore independent of the step count. With an integral
/// loss the adjoint gains the integrand's gradient as a forcing term.
GradResult grad_adjoint(const ParamField& field, const Tensor& z0, odeint::DepthSpan span,
                        const odeint::SolverConfig& cfg,
                        const std::optional<TerminalLoss>& terminal,
                        const std::optional<IntegralLoss>& integral = {});

}  // namespace continua::sensitivity
