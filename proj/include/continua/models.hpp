#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "continua/nn.hpp"
#include "continua/odeint.hpp"
#include "continua/rng.hpp"
#include "continua/tensor.hpp"

namespace continua::models {

enum class Divergence { none, exact, hutchinson };

Divergence divergence_from_string(const std::string& name);

/// Trace of df/dz per batch row, by d reverse passes with basis cotangents.
/// Rejected above d = 64; use the Hutchinson estimator there.
Tensor divergence_exact(const odeint::VectorField& f, double s, const Tensor& z);

/// Unbiased stochastic trace: mean over samples of eps^T (df/dz) eps with
/// Rademacher eps, one reverse pass per sample. Exact in a single sample when
/// the Jacobian is diagonal (eps_i^2 = 1).
Tensor divergence_hutchinson(const odeint::VectorField& f, double s, const Tensor& z,
                             std::size_t n_samples, Rng& rng);
/// Same estimator with caller-fixed noise (one [B x d] tensor per sample),
/// which keeps the draw constant across the evaluations of one solve.
Tensor divergence_hutchinson_fixed(const odeint::VectorField& f, double s, const Tensor& z,
                                   const std::vector<Tensor>& noise);

/// Energy-based vector fields defined through a scalar network E(s, z) -> [B x 1].
///  - hamiltonian: z = (q, p), dz/ds = (dE/dp, -dE/dq)
///  - stable:      dz/ds = -dE/dz (gradient flow; E non-increasing)
///  - lagrangian:  z = (q, dq), dz/ds = (dq, ddq) with ddq from the
///    Euler-Lagrange equations; needs nested second derivatives, so this kind
///    is evaluation-only: differentiating through it is rejected.
class EnergyField : public nn::Layer {
 public:
  enum class Kind { hamiltonian, lagrangian, stable };

  EnergyField(Kind kind, nn::LayerPtr scalar_net);

  Tensor forward(double s, const Tensor& z) const override;
  std::string describe() const override;
  void collect_params(const std::string& prefix, std::vector<nn::NamedParam>& out) const override;

  Kind kind() const { return kind_; }
  const nn::LayerPtr& scalar_net() const { return net_; }

  /// Scalar energy values [B x 1] at z, for conservation/descent checks.
  Tensor energy(double s, const Tensor& z) const;

 private:
  Kind kind_;
  nn::LayerPtr net_;
};

Tensor hamiltonian_field(const nn::Layer& scalar_net, double s, const Tensor& z);
Tensor lagrangian_field(const nn::Layer& scalar_net, double s, const Tensor& z);
Tensor stable_field(const nn::Layer& scalar_net, double s, const Tensor& z);

/// Wraps a field network into solver-ready dynamics: zero-augmentation,
/// higher-order state packing, and an optional trailing divergence
/// accumulator column riding the state.
class DEFunc {
 public:
  DEFunc(nn::LayerPtr field, std::size_t order = 1, std::size_t augment_dims = 0,
         Divergence divergence = Divergence::none, std::size_t trace_samples = 1);

  /// x [B x d] -> solver state [B x (d + augment_dims [+1])], zero pad after
  /// the data dims, accumulator (when any) last.
  Tensor pack(const Tensor& x) const;
  /// Strips the accumulator column; augmented dims stay (a readout follows).
  Tensor strip(const Tensor& state) const;
  /// Last state column as [B]; only valid with a divergence mode.
  Tensor accumulator(const Tensor& state) const;

  /// dstate/ds at depth s. Wire format matches pack's output.
  Tensor derivative(double s, const Tensor& state) const;

  odeint::VectorField as_field() const;
  /// Same dynamics with the Hutchinson noise frozen (one draw per solve).
  odeint::VectorField as_field_fixed_noise(std::vector<Tensor> noise) const;
  /// Core dynamics without the accumulator column, for reverse-time sampling.
  odeint::VectorField core_field() const;

  const nn::LayerPtr& field() const { return field_; }
  std::size_t order() const { return order_; }
  std::size_t augment_dims() const { return augment_dims_; }
  Divergence divergence() const { return divergence_; }
  std::size_t trace_samples() const { return trace_samples_; }
  /// State columns excluding the accumulator, given a data dim.
  std::size_t core_dim(std::size_t data_dim) const { return data_dim + augment_dims_; }

 private:
  Tensor core_derivative(double s, const Tensor& core) const;

  nn::LayerPtr field_;
  std::size_t order_;
  std::size_t augment_dims_;
  Divergence divergence_;
  std::size_t trace_samples_;
  mutable Rng hutchinson_rng_{0x9b97f4a7c15ULL};
};

enum class SensitivityMethod { autograd, adjoint };

SensitivityMethod sensitivity_from_string(const std::string& name);
std::string sensitivity_name(SensitivityMethod m);

/// A continuous-depth block: forward passes solve an initial value problem
/// over the depth span. Keeps cumulative NFE accounting across calls.
class NeuralODE {
 public:
  explicit NeuralODE(DEFunc func, odeint::DepthSpan span = {},
                     odeint::SolverConfig solver = {},
                     SensitivityMethod sensitivity = SensitivityMethod::adjoint);

  /// [B x d] -> [B x (d + augment_dims)]; accumulator stripped.
  Tensor forward(const Tensor& x) const;
  /// States at the given depths, [length x B x dim]; values only.
  odeint::Trajectory trajectory(const Tensor& x, const std::vector<double>& eval_points) const;

  const DEFunc& func() const { return func_; }
  DEFunc& func() { return func_; }
  const odeint::DepthSpan& span() const { return span_; }
  const odeint::SolverConfig& solver() const { return solver_; }
  SensitivityMethod sensitivity() const { return sensitivity_; }

  std::size_t num_parameters() const;
  double cumulative_nfe() const { return nfe_; }
  odeint::SolveStats last_stats() const { return last_stats_; }

  /// Human-readable description: order, solver, interval, tolerances,
  /// parameter count, cumulative NFE.
  std::string summary() const;
  /// The same fields as a JSON object (serialized string).
  std::string summary_json() const;

 private:
  DEFunc func_;
  odeint::DepthSpan span_;
  odeint::SolverConfig solver_;
  SensitivityMethod sensitivity_;
  mutable double nfe_ = 0.0;
  mutable odeint::SolveStats last_stats_;
};

/// Continuous normalizing flow over the DEFunc's dynamics. log_prob
/// integrates data -> base accumulating d(acc)/ds = -div f alongside the
/// state and evaluates log N(z(s1); 0, I) - acc. Sampling integrates the
/// reversed field from base draws, without divergence accounting.
class CNF {
 public:
  CNF(DEFunc func, std::size_t data_dim, odeint::DepthSpan span = {},
      odeint::SolverConfig solver = {});

  /// [B x d] -> [B] log-densities. rng feeds the Hutchinson noise (one fixed
  /// draw per call); unused in exact mode.
  Tensor log_prob(const Tensor& x, Rng& rng) const;
  Tensor sample(std::size_t n, Rng& rng) const;

  const DEFunc& func() const { return func_; }
  const odeint::DepthSpan& span() const { return span_; }
  const odeint::SolverConfig& solver() const { return solver_; }
  std::size_t num_parameters() const;
  odeint::SolveStats last_stats() const { return last_stats_; }

  std::size_t data_dim() const { return data_dim_; }
  /// Flow dimensionality (data dims + augmentation).
  std::size_t flow_dim() const { return func_.core_dim(data_dim_); }

 private:
  DEFunc func_;
  std::size_t data_dim_;
  odeint::DepthSpan span_;
  odeint::SolverConfig solver_;
  mutable odeint::SolveStats last_stats_;
};

}  // namespace continua::models
