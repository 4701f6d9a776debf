#include "continua/models.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "continua/autograd.hpp"

namespace continua::models {

Divergence divergence_from_string(const std::string& name) {
  if (name == "none") return Divergence::none;
  if (name == "exact") return Divergence::exact;
  if (name == "hutchinson") return Divergence::hutchinson;
  throw Error("unknown divergence mode '" + name + "' (expected none, exact or hutchinson)");
}

SensitivityMethod sensitivity_from_string(const std::string& name) {
  if (name == "autograd") return SensitivityMethod::autograd;
  if (name == "adjoint") return SensitivityMethod::adjoint;
  throw Error("unknown sensitivity method '" + name + "' (expected autograd or adjoint)");
}

std::string sensitivity_name(SensitivityMethod m) {
  return m == SensitivityMethod::autograd ? "autograd" : "adjoint";
}

namespace {

// Differentiation staging shared by the divergence and energy wrappers.
// When the incoming state is part of an active graph we differentiate
// through it directly; otherwise a detached local leaf stands in, and the
// result stays connected to the field parameters but not the caller's state.
struct Probe {
  Tensor zin;
  bool create_graph;
  autograd::EnableGradGuard guard;  // recording on for the inner reverse pass

  explicit Probe(const Tensor& z)
      : create_graph(autograd::grad_enabled() || z.requires_grad()), guard() {
    if (z.requires_grad()) {
      zin = z;
    } else {
      zin = z.detach();
      zin.set_requires_grad(true);
    }
  }
};

Tensor scalar_net_values(const nn::Layer& net, double s, const Tensor& z) {
  Tensor e = net.forward(s, z);
  if (e.rank() != 2 || e.extent(1) != 1 || e.extent(0) != z.extent(0)) {
    throw ShapeError("energy network must map [B x d] to [B x 1], got " + shape_str(e.shape()) +
                     " for input " + shape_str(z.shape()));
  }
  return e;
}

}  // namespace

Tensor divergence_exact(const odeint::VectorField& f, double s, const Tensor& z) {
  if (z.rank() != 2) {
    throw ShapeError("divergence_exact: state must be [B x d], got " + shape_str(z.shape()));
  }
  const std::size_t B = z.extent(0), d = z.extent(1);
  if (d > 64) {
    throw Error("divergence_exact: dimension " + std::to_string(d) +
                " exceeds 64; use divergence_hutchinson");
  }
  Probe probe(z);
  Tensor fz = f(s, probe.zin);
  if (fz.shape() != probe.zin.shape()) {
    throw ShapeError("divergence_exact: field output " + shape_str(fz.shape()) +
                     " does not match state " + shape_str(z.shape()));
  }
  Tensor div = Tensor::zeros({B, 1});
  for (std::size_t i = 0; i < d; ++i) {
    Tensor root = sum(slice_cols(fz, i, i + 1));
    if (!root.requires_grad()) continue;  // component constant in z and params
    autograd::GradientMap gm = autograd::backward(root, probe.create_graph, {probe.zin});
    div = add(div, slice_cols(gm.get(probe.zin), i, i + 1));
  }
  return reshape(div, {B});
}

namespace {

Tensor hutchinson_impl(const odeint::VectorField& f, double s, const Tensor& z,
                       const std::vector<Tensor>& noise) {
  if (z.rank() != 2) {
    throw ShapeError("divergence_hutchinson: state must be [B x d], got " + shape_str(z.shape()));
  }
  if (noise.empty()) throw Error("divergence_hutchinson: needs at least one sample");
  const std::size_t B = z.extent(0);
  Probe probe(z);
  Tensor fz = f(s, probe.zin);
  if (fz.shape() != probe.zin.shape()) {
    throw ShapeError("divergence_hutchinson: field output " + shape_str(fz.shape()) +
                     " does not match state " + shape_str(z.shape()));
  }
  Tensor est = Tensor::zeros({B});
  for (const Tensor& eps : noise) {
    if (eps.shape() != z.shape()) {
      throw ShapeError("divergence_hutchinson: noise shape " + shape_str(eps.shape()) +
                       " does not match state " + shape_str(z.shape()));
    }
    Tensor root = sum(mul(fz, eps));
    if (!root.requires_grad()) continue;
    autograd::GradientMap gm = autograd::backward(root, probe.create_graph, {probe.zin});
    est = add(est, sum(mul(gm.get(probe.zin), eps), 1));
  }
  return mul(est, Tensor::scalar(1.0 / static_cast<double>(noise.size())));
}

}  // namespace

Tensor divergence_hutchinson(const odeint::VectorField& f, double s, const Tensor& z,
                             std::size_t n_samples, Rng& rng) {
  if (n_samples == 0) throw Error("divergence_hutchinson: needs at least one sample");
  std::vector<Tensor> noise;
  noise.reserve(n_samples);
  for (std::size_t j = 0; j < n_samples; ++j) noise.push_back(rand_rademacher(rng, z.shape()));
  return hutchinson_impl(f, s, z, noise);
}

Tensor divergence_hutchinson_fixed(const odeint::VectorField& f, double s, const Tensor& z,
                                   const std::vector<Tensor>& noise) {
  return hutchinson_impl(f, s, z, noise);
}

// --- energy fields -----------------------------------------------------------

Tensor hamiltonian_field(const nn::Layer& scalar_net, double s, const Tensor& z) {
  if (z.rank() != 2 || z.extent(1) % 2 != 0) {
    throw ShapeError("hamiltonian_field: state must be [B x 2n], got " + shape_str(z.shape()));
  }
  const std::size_t n = z.extent(1) / 2;
  Probe probe(z);
  Tensor H = scalar_net_values(scalar_net, s, probe.zin);
  Tensor root = sum(H);
  Tensor grad;
  if (root.requires_grad()) {
    grad = autograd::backward(root, probe.create_graph, {probe.zin}).get(probe.zin);
  } else {
    grad = Tensor::zeros(z.shape());
  }
  return concat_cols({slice_cols(grad, n, 2 * n), neg(slice_cols(grad, 0, n))});
}

Tensor stable_field(const nn::Layer& scalar_net, double s, const Tensor& z) {
  if (z.rank() != 2) {
    throw ShapeError("stable_field: state must be [B x d], got " + shape_str(z.shape()));
  }
  Probe probe(z);
  Tensor E = scalar_net_values(scalar_net, s, probe.zin);
  Tensor root = sum(E);
  if (!root.requires_grad()) return Tensor::zeros(z.shape());
  return neg(autograd::backward(root, probe.create_graph, {probe.zin}).get(probe.zin));
}

namespace {

// Dense n x n inverse by Gauss-Jordan with partial pivoting; returns false on
// a numerically singular pivot.
bool invert(std::vector<double>& m, std::size_t n, std::vector<double>& inv) {
  inv.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) inv[i * n + i] = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(m[r * n + col]) > std::abs(m[piv * n + col])) piv = r;
    }
    if (m[piv * n + col] == 0.0) return false;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(m[piv * n + c], m[col * n + c]);
        std::swap(inv[piv * n + c], inv[col * n + c]);
      }
    }
    const double p = m[col * n + col];
    for (std::size_t c = 0; c < n; ++c) {
      m[col * n + c] /= p;
      inv[col * n + c] /= p;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double factor = m[r * n + col];
      if (factor == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        m[r * n + c] -= factor * m[col * n + c];
        inv[r * n + c] -= factor * inv[col * n + c];
      }
    }
  }
  return true;
}

double norm1(const std::vector<double>& m, std::size_t n) {
  double best = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    double colsum = 0.0;
    for (std::size_t r = 0; r < n; ++r) colsum += std::abs(m[r * n + c]);
    best = std::max(best, colsum);
  }
  return best;
}

}  // namespace

Tensor lagrangian_field(const nn::Layer& scalar_net, double s, const Tensor& z) {
  if (z.rank() != 2 || z.extent(1) % 2 != 0) {
    throw ShapeError("lagrangian_field: state must be [B x 2n], got " + shape_str(z.shape()));
  }
  if (autograd::grad_enabled() && z.requires_grad()) {
    throw Error(
        "lagrangian_field: differentiating through the Lagrangian wrapper is not supported "
        "(its dynamics already consume both nested differentiation levels)");
  }
  const std::size_t B = z.extent(0);
  const std::size_t n = z.extent(1) / 2;

  autograd::EnableGradGuard on;
  Tensor zl = z.detach();
  zl.set_requires_grad(true);
  Tensor L = scalar_net_values(scalar_net, s, zl);
  Tensor root = sum(L);

  Tensor grad;  // dL/d(q, qdot), level-1 graph
  std::vector<Tensor> hess_rows;  // one [B x 2n] value row per qdot component
  if (root.requires_grad()) {
    autograd::GradientMap gm1 = autograd::backward(root, true);
    grad = gm1.get(zl);
    Tensor gqd = slice_cols(grad, n, 2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      Tensor r2 = sum(slice_cols(gqd, i, i + 1));
      if (r2.requires_grad()) {
        hess_rows.push_back(autograd::backward(r2, false).get(zl));
      } else {
        hess_rows.push_back(Tensor::zeros(z.shape()));
      }
    }
  } else {
    grad = Tensor::zeros(z.shape());
    for (std::size_t i = 0; i < n; ++i) hess_rows.push_back(Tensor::zeros(z.shape()));
  }

  std::vector<double> out(B * 2 * n);
  std::vector<double> M(n * n), Minv, cross(n * n);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        M[i * n + j] = hess_rows[i].at(b, n + j);      // d2L / dqdot_i dqdot_j
        cross[i * n + j] = hess_rows[i].at(b, j);      // d2L / dqdot_i dq_j
      }
    }
    std::vector<double> Mwork = M;
    const double m_norm = norm1(M, n);
    if (!invert(Mwork, n, Minv)) {
      throw Error("lagrangian_field: singular mass matrix at batch index " + std::to_string(b));
    }
    const double cond = m_norm * norm1(Minv, n);
    if (!(cond <= 1e12)) {
      throw Error("lagrangian_field: mass matrix condition number " + std::to_string(cond) +
                  " exceeds 1e12 at batch index " + std::to_string(b));
    }
    for (std::size_t i = 0; i < n; ++i) {
      double force = grad.at(b, i);
      for (std::size_t j = 0; j < n; ++j) force -= cross[i * n + j] * z.at(b, n + j);
      // store rhs temporarily in out's qdd slot
      out[b * 2 * n + n + i] = force;
    }
    for (std::size_t i = 0; i < n; ++i) {
      double qdd = 0.0;
      for (std::size_t j = 0; j < n; ++j) qdd += Minv[i * n + j] * out[b * 2 * n + n + j];
      // overwrite after full row uses rhs; stage into a scratch first
      M[i] = qdd;  // reuse M's first row as scratch (already consumed)
    }
    for (std::size_t i = 0; i < n; ++i) out[b * 2 * n + n + i] = M[i];
    for (std::size_t i = 0; i < n; ++i) out[b * 2 * n + i] = z.at(b, n + i);  // dq/ds = qdot
  }
  return Tensor::from_data({B, 2 * n}, std::move(out));
}

EnergyField::EnergyField(Kind kind, nn::LayerPtr scalar_net)
    : kind_(kind), net_(std::move(scalar_net)) {
  if (!net_) throw Error("EnergyField: null scalar net");
}

Tensor EnergyField::forward(double s, const Tensor& z) const {
  switch (kind_) {
    case Kind::hamiltonian: return hamiltonian_field(*net_, s, z);
    case Kind::lagrangian: return lagrangian_field(*net_, s, z);
    case Kind::stable: return stable_field(*net_, s, z);
  }
  throw Error("EnergyField: bad kind");
}

std::string EnergyField::describe() const {
  const char* k = kind_ == Kind::hamiltonian ? "hamiltonian"
                  : kind_ == Kind::lagrangian ? "lagrangian"
                                              : "stable";
  return std::string("EnergyField(") + k + ", " + net_->describe() + ")";
}

void EnergyField::collect_params(const std::string& prefix,
                                 std::vector<nn::NamedParam>& out) const {
  net_->collect_params(prefix + "energy.", out);
}

Tensor EnergyField::energy(double s, const Tensor& z) const {
  autograd::NoGradGuard off;
  return scalar_net_values(*net_, s, z);
}

// --- DEFunc ----------------------------------------------------------------

DEFunc::DEFunc(nn::LayerPtr field, std::size_t order, std::size_t augment_dims,
               Divergence divergence, std::size_t trace_samples)
    : field_(std::move(field)),
      order_(order),
      augment_dims_(augment_dims),
      divergence_(divergence),
      trace_samples_(trace_samples) {
  if (!field_) throw Error("DEFunc: null field");
  if (order_ == 0) throw Error("DEFunc: order must be >= 1");
  if (trace_samples_ == 0) throw Error("DEFunc: trace_samples must be >= 1");
}

Tensor DEFunc::pack(const Tensor& x) const {
  if (x.rank() != 2) {
    throw ShapeError("DEFunc: input must be [B x d], got " + shape_str(x.shape()));
  }
  Tensor st = x;
  if (augment_dims_ > 0) st = pad_cols(st, 0, augment_dims_);
  if (st.extent(1) % order_ != 0) {
    throw ShapeError("DEFunc: state dimension " + std::to_string(st.extent(1)) +
                     " is not divisible by order " + std::to_string(order_));
  }
  if (divergence_ != Divergence::none) st = pad_cols(st, 0, 1);
  return st;
}

Tensor DEFunc::strip(const Tensor& state) const {
  if (divergence_ == Divergence::none) return state;
  return slice_cols(state, 0, state.extent(1) - 1);
}

Tensor DEFunc::accumulator(const Tensor& state) const {
  if (divergence_ == Divergence::none) {
    throw Error("DEFunc: no accumulator without a divergence mode");
  }
  const std::size_t D = state.extent(1) - 1;
  return reshape(slice_cols(state, D, D + 1), {state.extent(0)});
}

Tensor DEFunc::core_derivative(double s, const Tensor& core) const {
  const std::size_t D = core.extent(1);
  if (D % order_ != 0) {
    throw ShapeError("DEFunc: state dimension " + std::to_string(D) +
                     " is not divisible by order " + std::to_string(order_));
  }
  if (order_ == 1) {
    Tensor out = field_->forward(s, core);
    if (out.shape() != core.shape()) {
      throw ShapeError("DEFunc: field output " + shape_str(out.shape()) +
                       " does not match state " + shape_str(core.shape()));
    }
    return out;
  }
  const std::size_t m = D / order_;
  Tensor top = field_->forward(s, core);
  if (top.rank() != 2 || top.extent(0) != core.extent(0) || top.extent(1) != m) {
    throw ShapeError("DEFunc: order-" + std::to_string(order_) + " field must output [B x " +
                     std::to_string(m) + "], got " + shape_str(top.shape()));
  }
  std::vector<Tensor> parts;
  parts.reserve(order_);
  for (std::size_t i = 1; i < order_; ++i) {
    parts.push_back(slice_cols(core, i * m, (i + 1) * m));
  }
  parts.push_back(top);
  return concat_cols(parts);
}

Tensor DEFunc::derivative(double s, const Tensor& state) const {
  if (divergence_ == Divergence::none) return core_derivative(s, state);
  const std::size_t D = state.extent(1) - 1;
  Tensor core = slice_cols(state, 0, D);
  auto core_fn = [this](double ss, const Tensor& zz) { return core_derivative(ss, zz); };
  Tensor div;
  if (divergence_ == Divergence::exact) {
    div = divergence_exact(core_fn, s, core);
  } else {
    div = divergence_hutchinson(core_fn, s, core, trace_samples_, hutchinson_rng_);
  }
  Tensor dyn = core_derivative(s, core);
  return concat_cols({dyn, reshape(neg(div), {state.extent(0), 1})});
}

odeint::VectorField DEFunc::as_field() const {
  return [this](double s, const Tensor& state) { return derivative(s, state); };
}

odeint::VectorField DEFunc::as_field_fixed_noise(std::vector<Tensor> noise) const {
  if (divergence_ != Divergence::hutchinson) {
    throw Error("DEFunc: fixed noise only applies to the Hutchinson estimator");
  }
  return [this, noise = std::move(noise)](double s, const Tensor& state) {
    const std::size_t D = state.extent(1) - 1;
    Tensor core = slice_cols(state, 0, D);
    auto core_fn = [this](double ss, const Tensor& zz) { return core_derivative(ss, zz); };
    Tensor div = divergence_hutchinson_fixed(core_fn, s, core, noise);
    Tensor dyn = core_derivative(s, core);
    return concat_cols({dyn, reshape(neg(div), {state.extent(0), 1})});
  };
}

odeint::VectorField DEFunc::core_field() const {
  return [this](double s, const Tensor& core) { return core_derivative(s, core); };
}

// --- NeuralODE -----------------------------------------------------------------

NeuralODE::NeuralODE(DEFunc func, odeint::DepthSpan span, odeint::SolverConfig solver,
                     SensitivityMethod sensitivity)
    : func_(std::move(func)), span_(span), solver_(solver), sensitivity_(sensitivity) {
  if (func_.divergence() != Divergence::none) {
    solver_.error_ignore_trailing = std::max<std::size_t>(solver_.error_ignore_trailing, 1);
  }
}

Tensor NeuralODE::forward(const Tensor& x) const {
  Tensor packed = func_.pack(x);
  auto [zT, stats] = odeint::solve_terminal(func_.as_field(), packed, span_, solver_);
  last_stats_ = stats;
  nfe_ += static_cast<double>(stats.nfe);
  return func_.strip(zT);
}

odeint::Trajectory NeuralODE::trajectory(const Tensor& x,
                                         const std::vector<double>& eval_points) const {
  Tensor packed = func_.pack(x);
  odeint::Trajectory traj = odeint::trajectory_eval(func_.as_field(), packed, eval_points, solver_);
  last_stats_ = traj.stats;
  nfe_ += static_cast<double>(traj.stats.nfe);
  return traj;
}

std::size_t NeuralODE::num_parameters() const { return func_.field()->param_count(); }

namespace {

std::string fmt_real(double v) {
  std::ostringstream os;
  os << v;
  std::string s = os.str();
  if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
      s.find("inf") == std::string::npos && s.find("nan") == std::string::npos) {
    s += ".0";
  }
  return s;
}

}  // namespace

std::string NeuralODE::summary() const {
  std::ostringstream os;
  os << "Neural DE:\n";
  os << "\t- order: " << func_.order() << "\n";
  os << "\t- solver: " << odeint::method_name(solver_.method) << "\n";
  os << "\t- integration interval: " << fmt_real(span_.s0) << " to " << fmt_real(span_.s1) << "\n";
  os << "\t- tolerances: relative " << solver_.rtol << " absolute " << solver_.atol << "\n";
  os << "\t- num_parameters: " << num_parameters() << "\n";
  os << std::fixed << std::setprecision(1) << "\t- NFE: " << nfe_ << "\n";
  os.unsetf(std::ios_base::floatfield);
  os << "\nVector field: " << func_.field()->describe() << "\n";
  return os.str();
}

std::string NeuralODE::summary_json() const {
  nlohmann::json j;
  j["order"] = func_.order();
  j["solver"] = odeint::method_name(solver_.method);
  j["interval"] = {span_.s0, span_.s1};
  j["rtol"] = solver_.rtol;
  j["atol"] = solver_.atol;
  j["num_parameters"] = num_parameters();
  j["nfe"] = nfe_;
  j["sensitivity"] = sensitivity_name(sensitivity_);
  j["field"] = func_.field()->describe();
  return j.dump();
}

// --- CNF -------------------------------------------------------------------

CNF::CNF(DEFunc func, std::size_t data_dim, odeint::DepthSpan span, odeint::SolverConfig solver)
    : func_(std::move(func)), data_dim_(data_dim), span_(span), solver_(solver) {
  if (func_.divergence() == Divergence::none) {
    throw Error("CNF: the wrapped dynamics need a divergence mode");
  }
  solver_.error_ignore_trailing = std::max<std::size_t>(solver_.error_ignore_trailing, 1);
}

Tensor CNF::log_prob(const Tensor& x, Rng& rng) const {
  if (x.rank() != 2 || x.extent(1) != data_dim_) {
    throw ShapeError("CNF: input must be [B x " + std::to_string(data_dim_) + "], got " +
                     shape_str(x.shape()));
  }
  const std::size_t B = x.extent(0);
  const std::size_t D = flow_dim();
  Tensor packed = func_.pack(x);

  odeint::VectorField fld;
  if (func_.divergence() == Divergence::hutchinson) {
    std::vector<Tensor> noise;
    noise.reserve(func_.trace_samples());
    for (std::size_t j = 0; j < func_.trace_samples(); ++j) {
      noise.push_back(rand_rademacher(rng, {B, D}));
    }
    fld = func_.as_field_fixed_noise(std::move(noise));
  } else {
    fld = func_.as_field();
  }

  auto [zT, stats] = odeint::solve_terminal(fld, packed, span_, solver_);
  last_stats_ = stats;

  Tensor z1 = slice_cols(zT, 0, D);
  Tensor acc = reshape(slice_cols(zT, D, D + 1), {B});
  const double log2pi = std::log(2.0 * 3.14159265358979323846);
  Tensor log_base = add(mul(sum(square(z1), 1), Tensor::scalar(-0.5)),
                        Tensor::scalar(-0.5 * static_cast<double>(D) * log2pi));
  Tensor lp = sub(log_base, acc);
  if (!lp.all_finite()) {
    throw Error("CNF: non-finite log-density for batch element " +
                std::to_string(lp.first_nonfinite()));
  }
  return lp;
}

Tensor CNF::sample(std::size_t n, Rng& rng) const {
  if (n == 0) throw Error("CNF: sample count must be positive");
  autograd::NoGradGuard off;
  const std::size_t D = flow_dim();
  Tensor w = randn(rng, {n, D});
  auto core = func_.core_field();
  const double s0 = span_.s0, s1 = span_.s1;
  odeint::VectorField reversed = [core, s0, s1](double u, const Tensor& z) {
    return neg(core(s0 + s1 - u, z));
  };
  odeint::SolverConfig cfg = solver_;
  cfg.error_ignore_trailing = 0;
  auto [x, stats] = odeint::solve_terminal(reversed, w, {s0, s1}, cfg);
  last_stats_ = stats;
  return x;
}

std::size_t CNF::num_parameters() const { return func_.field()->param_count(); }

}  // namespace continua::models
