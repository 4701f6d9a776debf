#include "continua/odeint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "continua/autograd.hpp"

namespace continua::odeint {

Method method_from_string(const std::string& name) {
  if (name == "euler") return Method::euler;
  if (name == "rk4") return Method::rk4;
  if (name == "dopri5") return Method::dopri5;
  throw Error("unknown solver method '" + name + "' (expected euler, rk4 or dopri5)");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::euler: return "euler";
    case Method::rk4: return "rk4";
    case Method::dopri5: return "dopri5";
  }
  return "?";
}

namespace {

struct Resolved {
  double h_init;
  double h_min;
  double h_max;
};

Resolved resolve(const SolverConfig& cfg, double span_len) {
  if (cfg.rtol <= 0.0 || cfg.atol <= 0.0) {
    throw Error("solver config: rtol and atol must be positive");
  }
  if (cfg.max_steps == 0) throw Error("solver config: max_steps must be positive");
  Resolved r;
  r.h_max = cfg.h_max > 0.0 ? cfg.h_max : span_len;
  r.h_init = cfg.h_init > 0.0 ? cfg.h_init : 0.01 * span_len;
  r.h_min = cfg.h_min > 0.0 ? cfg.h_min : 1e-12 * span_len;
  if (!(r.h_min <= r.h_init && r.h_init <= r.h_max)) {
    throw Error("solver config: requires h_min <= h_init <= h_max, got " +
                std::to_string(r.h_min) + ", " + std::to_string(r.h_init) + ", " +
                std::to_string(r.h_max));
  }
  return r;
}

Tensor axpy(const Tensor& z, double a, const Tensor& k) { return add(z, mul(k, Tensor::scalar(a))); }

void check_finite(const Tensor& z, double depth, const SolveStats& stats) {
  if (!z.all_finite()) {
    throw SolveError("solve: state became non-finite at depth " + std::to_string(depth), stats,
                     depth);
  }
}

// Dormand-Prince 5(4) coefficients.
constexpr double kC2 = 1.0 / 5, kC3 = 3.0 / 10, kC4 = 4.0 / 5, kC5 = 8.0 / 9;
constexpr double kA21 = 1.0 / 5;
constexpr double kA31 = 3.0 / 40, kA32 = 9.0 / 40;
constexpr double kA41 = 44.0 / 45, kA42 = -56.0 / 15, kA43 = 32.0 / 9;
constexpr double kA51 = 19372.0 / 6561, kA52 = -25360.0 / 2187, kA53 = 64448.0 / 6561,
                 kA54 = -212.0 / 729;
constexpr double kA61 = 9017.0 / 3168, kA62 = -355.0 / 33, kA63 = 46732.0 / 5247,
                 kA64 = 49.0 / 176, kA65 = -5103.0 / 18656;
constexpr double kB1 = 35.0 / 384, kB3 = 500.0 / 1113, kB4 = 125.0 / 192, kB5 = -2187.0 / 6784,
                 kB6 = 11.0 / 84;
// 5th-order weights minus the embedded 4th-order weights.
constexpr double kE1 = 71.0 / 57600, kE3 = -71.0 / 16695, kE4 = 71.0 / 1920,
                 kE5 = -17253.0 / 339200, kE6 = 22.0 / 525, kE7 = -1.0 / 40;

}  // namespace

Tensor euler_step(const VectorField& f, double s, const Tensor& z, double h) {
  return axpy(z, h, f(s, z));
}

Tensor rk4_step(const VectorField& f, double s, const Tensor& z, double h) {
  Tensor k1 = f(s, z);
  Tensor k2 = f(s + 0.5 * h, axpy(z, 0.5 * h, k1));
  Tensor k3 = f(s + 0.5 * h, axpy(z, 0.5 * h, k2));
  Tensor k4 = f(s + h, axpy(z, h, k3));
  Tensor incr = add(add(k1, k4), mul(add(k2, k3), Tensor::scalar(2.0)));
  return axpy(z, h / 6.0, incr);
}

Dopri5Step dopri5_step(const VectorField& f, double s, const Tensor& z, double h,
                       const Tensor& k1) {
  Tensor k2 = f(s + kC2 * h, axpy(z, h * kA21, k1));
  Tensor k3 = f(s + kC3 * h, add(z, add(mul(k1, Tensor::scalar(h * kA31)),
                                        mul(k2, Tensor::scalar(h * kA32)))));
  Tensor y4 = axpy(axpy(axpy(z, h * kA41, k1), h * kA42, k2), h * kA43, k3);
  Tensor k4 = f(s + kC4 * h, y4);
  Tensor y5 = axpy(axpy(axpy(axpy(z, h * kA51, k1), h * kA52, k2), h * kA53, k3), h * kA54, k4);
  Tensor k5 = f(s + kC5 * h, y5);
  Tensor y6 = axpy(axpy(axpy(axpy(axpy(z, h * kA61, k1), h * kA62, k2), h * kA63, k3), h * kA64, k4),
                   h * kA65, k5);
  Tensor k6 = f(s + h, y6);
  Tensor z_next =
      axpy(axpy(axpy(axpy(axpy(z, h * kB1, k1), h * kB3, k3), h * kB4, k4), h * kB5, k5), h * kB6, k6);
  Tensor k7 = f(s + h, z_next);
  Tensor err = axpy(axpy(axpy(axpy(axpy(mul(k1, Tensor::scalar(h * kE1)), h * kE3, k3), h * kE4, k4),
                              h * kE5, k5),
                         h * kE6, k6),
                    h * kE7, k7);
  return {std::move(z_next), std::move(err), std::move(k7)};
}

StepDecision adapt_step(const Tensor& err, const Tensor& z, const Tensor& z_next,
                        const SolverConfig& cfg, double h, double span_length) {
  const Resolved res = resolve(cfg, span_length);
  const auto& ed = err.data();
  const auto& zd = z.data();
  const auto& znd = z_next.data();
  if (ed.size() != zd.size() || ed.size() != znd.size()) {
    throw ShapeError("adapt_step: mismatched shapes " + shape_str(err.shape()) + ", " +
                     shape_str(z.shape()) + ", " + shape_str(z_next.shape()));
  }

  std::size_t cols = 0, keep_cols = 0;
  if (cfg.error_ignore_trailing > 0 && z.rank() == 2) {
    cols = z.extent(1);
    keep_cols = cols > cfg.error_ignore_trailing ? cols - cfg.error_ignore_trailing : 0;
  }

  double sumsq = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < ed.size(); ++i) {
    if (cols > 0 && (i % cols) >= keep_cols) continue;
    const double scale = cfg.atol + cfg.rtol * std::max(std::abs(zd[i]), std::abs(znd[i]));
    const double q = ed[i] / scale;
    sumsq += q * q;
    ++count;
  }
  const double r = count ? std::sqrt(sumsq / static_cast<double>(count)) : 0.0;

  StepDecision dec;
  dec.error_ratio = r;
  dec.accept = std::isfinite(r) && r <= 1.0;
  double factor;
  if (!std::isfinite(r)) {
    factor = 0.2;
  } else if (r == 0.0) {
    factor = 5.0;
  } else {
    factor = std::clamp(0.9 * std::pow(r, -0.2), 0.2, 5.0);
  }
  dec.h_new = std::clamp(h * factor, res.h_min, res.h_max);
  return dec;
}

namespace {

// Adaptive integration state carried across trajectory segments: the step
// size and the first-same-as-last stage survive eval-point boundaries.
struct Cursor {
  double s;
  Tensor z;
  double h;
  Tensor k1;        // dopri5 only
  bool has_k1 = false;
};

void advance_fixed(const VectorField& f, Cursor& cur, double target, const SolverConfig& cfg,
                   const Resolved& res, SolveStats& stats, Solution* record) {
  const double len = target - cur.s;
  const auto n = static_cast<std::size_t>(std::ceil(len / res.h_init - 1e-12));
  const std::size_t steps = std::max<std::size_t>(n, 1);
  if (stats.accepted_steps + steps > cfg.max_steps) {
    throw SolveError("solve: " + std::to_string(stats.accepted_steps + steps) +
                         " fixed steps would exceed max_steps (" + std::to_string(cfg.max_steps) +
                         ")",
                     stats);
  }
  const double h = len / static_cast<double>(steps);
  const double s_base = cur.s;
  for (std::size_t i = 0; i < steps; ++i) {
    const double s = s_base + h * static_cast<double>(i);
    if (cfg.method == Method::euler) {
      cur.z = euler_step(f, s, cur.z, h);
      stats.nfe += 1;
    } else {
      cur.z = rk4_step(f, s, cur.z, h);
      stats.nfe += 4;
    }
    cur.s = (i + 1 == steps) ? target : s_base + h * static_cast<double>(i + 1);
    stats.accepted_steps += 1;
    check_finite(cur.z, cur.s, stats);
    if (record) {
      record->depths.push_back(cur.s);
      record->states.push_back(cur.z);
    }
  }
}

void advance_adaptive(const VectorField& f, Cursor& cur, double target, const SolverConfig& cfg,
                      const Resolved& res, SolveStats& stats, Solution* record) {
  if (!cur.has_k1) {
    cur.k1 = f(cur.s, cur.z);
    stats.nfe += 1;
    cur.has_k1 = true;
  }
  while (cur.s < target) {
    if (stats.accepted_steps + stats.rejected_steps >= cfg.max_steps) {
      throw SolveError("solve: exceeded max_steps (" + std::to_string(cfg.max_steps) +
                           ") before reaching depth " + std::to_string(target),
                       stats);
    }
    bool final_step = false;
    double h = cur.h;
    if (cur.s + h >= target) {
      h = target - cur.s;
      final_step = true;
    }
    Dopri5Step step = dopri5_step(f, cur.s, cur.z, h, cur.k1);
    stats.nfe += 6;
    check_finite(step.z_next, cur.s + h, stats);
    if (!step.err.all_finite()) {
      throw SolveError("solve: error estimate became non-finite at depth " +
                           std::to_string(cur.s + h),
                       stats, cur.s + h);
    }
    StepDecision dec = adapt_step(step.err, cur.z, step.z_next, cfg, h, res.h_max);
    if (dec.accept) {
      cur.s = final_step ? target : cur.s + h;
      cur.z = std::move(step.z_next);
      cur.k1 = std::move(step.k_last);
      stats.accepted_steps += 1;
      if (!final_step) cur.h = dec.h_new;
      if (record) {
        record->depths.push_back(cur.s);
        record->states.push_back(cur.z);
      }
    } else {
      if (h <= res.h_min) {
        throw SolveError("solve: step size underflow at depth " + std::to_string(cur.s), stats,
                         cur.s);
      }
      stats.rejected_steps += 1;
      cur.h = dec.h_new;
    }
  }
}

void advance(const VectorField& f, Cursor& cur, double target, const SolverConfig& cfg,
             const Resolved& res, SolveStats& stats, Solution* record) {
  if (target <= cur.s) return;
  if (cfg.method == Method::dopri5) {
    advance_adaptive(f, cur, target, cfg, res, stats, record);
  } else {
    advance_fixed(f, cur, target, cfg, res, stats, record);
  }
}

}  // namespace

Solution solve(const VectorField& f, const Tensor& z0, DepthSpan span, const SolverConfig& cfg) {
  if (!(span.s1 > span.s0)) {
    throw Error("solve: depth span requires s1 > s0, got [" + std::to_string(span.s0) + ", " +
                std::to_string(span.s1) + "]");
  }
  const Resolved res = resolve(cfg, span.length());

  Solution sol;
  sol.depths.push_back(span.s0);
  sol.states.push_back(z0);

  Cursor cur{span.s0, z0, res.h_init, Tensor(), false};
  advance(f, cur, span.s1, cfg, res, sol.stats, &sol);
  return sol;
}

std::pair<Tensor, SolveStats> solve_terminal(const VectorField& f, const Tensor& z0,
                                             DepthSpan span, const SolverConfig& cfg) {
  if (!(span.s1 > span.s0)) {
    throw Error("solve: depth span requires s1 > s0, got [" + std::to_string(span.s0) + ", " +
                std::to_string(span.s1) + "]");
  }
  const Resolved res = resolve(cfg, span.length());
  SolveStats stats;
  Cursor cur{span.s0, z0, res.h_init, Tensor(), false};
  advance(f, cur, span.s1, cfg, res, stats, nullptr);
  return {std::move(cur.z), stats};
}

Trajectory trajectory_eval(const VectorField& f, const Tensor& z0,
                           const std::vector<double>& eval_points, const SolverConfig& cfg) {
  if (eval_points.empty()) throw Error("trajectory_eval: no eval points");
  for (std::size_t i = 1; i < eval_points.size(); ++i) {
    if (!(eval_points[i] > eval_points[i - 1])) {
      throw Error("trajectory_eval: eval points must be strictly increasing");
    }
  }
  if (z0.rank() != 2) {
    throw ShapeError("trajectory_eval: expects a rank-2 initial state, got " +
                     shape_str(z0.shape()));
  }
  const double span_len = std::max(eval_points.back() - eval_points.front(), 1e-30);
  const Resolved res = resolve(cfg, span_len);

  // Sampled states never need the graph.
  autograd::NoGradGuard off;

  Trajectory traj;
  traj.depths = eval_points;
  const std::size_t B = z0.extent(0), d = z0.extent(1);
  std::vector<double> flat;
  flat.reserve(eval_points.size() * B * d);

  Cursor cur{eval_points.front(), z0, res.h_init, Tensor(), false};
  auto emit = [&](const Tensor& z) {
    const auto& zd = z.data();
    flat.insert(flat.end(), zd.begin(), zd.end());
  };
  emit(cur.z);
  for (std::size_t i = 1; i < eval_points.size(); ++i) {
    advance(f, cur, eval_points[i], cfg, res, traj.stats, nullptr);
    emit(cur.z);
  }
  traj.points = Tensor::from_data({eval_points.size(), B, d}, std::move(flat));
  return traj;
}

void dump_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("dump_trajectory: cannot open '" + path + "'");
  const std::size_t L = traj.points.extent(0);
  const std::size_t B = traj.points.extent(1);
  const std::size_t d = traj.points.extent(2);
  const auto& data = traj.points.data();
  for (std::size_t l = 0; l < L; ++l) {
    nlohmann::json rec;
    rec["s"] = traj.depths[l];
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t b = 0; b < B; ++b) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t j = 0; j < d; ++j) row.push_back(data[(l * B + b) * d + j]);
      rows.push_back(std::move(row));
    }
    rec["z"] = std::move(rows);
    out << rec.dump() << "\n";
  }
  nlohmann::json trailer;
  trailer["nfe"] = traj.stats.nfe;
  trailer["accepted_steps"] = traj.stats.accepted_steps;
  trailer["rejected_steps"] = traj.stats.rejected_steps;
  out << trailer.dump() << "\n";
  if (!out.good()) throw Error("dump_trajectory: write to '" + path + "' failed");
}

}  // namespace continua::odeint
