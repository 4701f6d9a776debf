#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "continua/tensor.hpp"

namespace continua::odeint {

/// A depth-indexed dynamics function: f(s, z) -> dz/ds, batch-leading shapes.
using VectorField = std::function<Tensor(double s, const Tensor& z)>;

enum class Method { euler, rk4, dopri5 };

Method method_from_string(const std::string& name);
std::string method_name(Method m);

struct DepthSpan {
  double s0 = 0.0;
  double s1 = 1.0;

  double length() const { return s1 - s0; }
};

struct SolverConfig {
  Method method = Method::dopri5;
  double rtol = 1e-4;
  double atol = 1e-4;
  double h_init = 0.0;  // <= 0 selects 0.01 * span length
  double h_min = 0.0;   // <= 0 selects 1e-12 * span length
  double h_max = 0.0;   // <= 0 selects the span length
  std::size_t max_steps = 10000;
  // Trailing state columns excluded from the adaptive error norm (log-density
  // or loss accumulators ride the state without steering step control).
  std::size_t error_ignore_trailing = 0;
};

struct SolveStats {
  std::size_t nfe = 0;
  std::size_t accepted_steps = 0;
  std::size_t rejected_steps = 0;

  SolveStats& operator+=(const SolveStats& o) {
    nfe += o.nfe;
    accepted_steps += o.accepted_steps;
    rejected_steps += o.rejected_steps;
    return *this;
  }
};

/// Integration failure: carries the statistics gathered so far and, for
/// non-finite blowups, the depth at which the state first left R.
class SolveError : public Error {
 public:
  SolveError(const std::string& msg, SolveStats stats_so_far, std::optional<double> at_depth = {})
      : Error(msg), stats(stats_so_far), depth(at_depth) {}

  SolveStats stats;
  std::optional<double> depth;
};

/// Full solver output: one state per accepted step (plus the initial state).
/// States keep their graph when recording is active, which is what
/// backprop-through-the-solver differentiates.
struct Solution {
  std::vector<double> depths;
  std::vector<Tensor> states;
  SolveStats stats;

  const Tensor& terminal() const { return states.back(); }
};

/// Values-only samples at caller-chosen depths, stacked [length x B x d].
struct Trajectory {
  Tensor points;
  std::vector<double> depths;
  SolveStats stats;
};

Solution solve(const VectorField& f, const Tensor& z0, DepthSpan span, const SolverConfig& cfg);

/// Terminal state only; intermediate states are not retained anywhere, which
/// keeps memory flat however many steps the solver takes.
std::pair<Tensor, SolveStats> solve_terminal(const VectorField& f, const Tensor& z0,
                                             DepthSpan span, const SolverConfig& cfg);

/// Integrates segment-to-segment through the eval points, carrying step size
/// and the first-same-as-last stage across segment boundaries.
Trajectory trajectory_eval(const VectorField& f, const Tensor& z0,
                           const std::vector<double>& eval_points, const SolverConfig& cfg);

// Single steps, exposed for convergence-order measurements.
Tensor euler_step(const VectorField& f, double s, const Tensor& z, double h);
Tensor rk4_step(const VectorField& f, double s, const Tensor& z, double h);

struct Dopri5Step {
  Tensor z_next;  // 5th-order estimate
  Tensor err;     // 5th minus 4th order estimate
  Tensor k_last;  // stage 7 = f(s+h, z_next), reusable as next step's stage 1
};

/// One Dormand-Prince step from a precomputed first stage k1 = f(s, z);
/// costs 6 fresh field evaluations.
Dopri5Step dopri5_step(const VectorField& f, double s, const Tensor& z, double h,
                       const Tensor& k1);

struct StepDecision {
  bool accept;
  double h_new;
  double error_ratio;
};

/// Error ratio r = rms(err / (atol + rtol*max(|z|,|z_next|))); accept iff
/// r <= 1; h_new = h * clamp(0.9 * r^(-1/5), 0.2, 5.0), then clamped to
/// [h_min, h_max].
StepDecision adapt_step(const Tensor& err, const Tensor& z, const Tensor& z_next,
                        const SolverConfig& cfg, double h, double span_length);

/// JSON-lines dump: one {"s": depth, "z": [[...]]} record per eval point and a
/// trailing {"nfe", "accepted_steps", "rejected_steps"} record.
void dump_trajectory(const Trajectory& traj, const std::string& path);

}  // namespace continua::odeint
