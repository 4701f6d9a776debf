#include "continua/sensitivity.hpp"

#include <cmath>

#include "continua/autograd.hpp"

namespace continua::sensitivity {

namespace {

Tensor reduce_rate(const Tensor& rate, IntegralLoss::Reduction red) {
  return red == IntegralLoss::Reduction::mean ? mean(rate) : sum(rate);
}

void require_scalar_loss(const Tensor& value, const char* which) {
  if (value.numel() != 1) {
    throw Error(std::string(which) + " loss must be scalar, got shape " +
                shape_str(value.shape()));
  }
}

}  // namespace

GradResult grad_backprop(const ParamField& field, const Tensor& z0, odeint::DepthSpan span,
                         const odeint::SolverConfig& cfg,
                         const std::optional<TerminalLoss>& terminal,
                         const std::optional<IntegralLoss>& integral) {
  if (!terminal && !integral) throw Error("grad_backprop: no loss given");

  autograd::EnableGradGuard on;
  Tensor z0l = z0.detach();
  z0l.set_requires_grad(true);

  odeint::Solution sol = odeint::solve(field.f, z0l, span, cfg);

  Tensor total;
  bool have_total = false;
  if (terminal) {
    total = terminal->fn(sol.terminal());
    require_scalar_loss(total, "terminal");
    have_total = true;
  }
  if (integral) {
    // Trapezoid on the depths the solver actually stepped through.
    std::vector<Tensor> rates;
    rates.reserve(sol.states.size());
    for (std::size_t i = 0; i < sol.states.size(); ++i) {
      rates.push_back(reduce_rate(integral->integrand(sol.depths[i], sol.states[i]),
                                  integral->reduction));
    }
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t i = 1; i < rates.size(); ++i) {
      const double half_dt = 0.5 * (sol.depths[i] - sol.depths[i - 1]);
      acc = add(acc, mul(add(rates[i - 1], rates[i]), Tensor::scalar(half_dt)));
    }
    total = have_total ? add(total, acc) : acc;
  }

  GradResult res;
  res.loss = total.value();
  res.forward_stats = sol.stats;
  if (!total.requires_grad()) {
    res.input_grad = Tensor::zeros(z0.shape());
    for (const auto& p : field.params) res.param_grads.push_back(Tensor::zeros(p.shape()));
    return res;
  }
  autograd::GradientMap gm = autograd::backward(total, false);
  res.input_grad = gm.get(z0l);
  for (const auto& p : field.params) res.param_grads.push_back(gm.get(p));
  return res;
}

GradResult grad_adjoint(const ParamField& field, const Tensor& z0, odeint::DepthSpan span,
                        const odeint::SolverConfig& cfg,
                        const std::optional<TerminalLoss>& terminal,
                        const std::optional<IntegralLoss>& integral) {
  if (!terminal && !integral) throw Error("grad_adjoint: no loss given");
  if (z0.rank() != 2) {
    throw ShapeError("grad_adjoint: initial state must be [B x d], got " + shape_str(z0.shape()));
  }
  const std::size_t B = z0.extent(0);
  const std::size_t d = z0.extent(1);
  const std::size_t bd = B * d;

  std::vector<std::size_t> offsets;
  std::size_t P = 0;
  for (const auto& p : field.params) {
    offsets.push_back(P);
    P += p.numel();
  }

  GradResult res;

  // Forward pass, values only; an integral loss rides as one extra column
  // (excluded from step control so the degenerate integrand changes nothing).
  Tensor z1;
  double integral_value = 0.0;
  {
    autograd::NoGradGuard off;
    if (integral) {
      auto fext = [&](double s, const Tensor& state) {
        Tensor z = slice_cols(state, 0, d);
        Tensor fz = field.f(s, z);
        Tensor rate = integral->integrand(s, z);
        Tensor col = rate.rank() == 2 ? rate : reshape(rate, {B, 1});
        return concat_cols({fz, col});
      };
      odeint::SolverConfig cfg_ext = cfg;
      cfg_ext.error_ignore_trailing += 1;
      auto [ext1, stats] = odeint::solve_terminal(fext, pad_cols(z0, 0, 1), span, cfg_ext);
      res.forward_stats = stats;
      z1 = slice_cols(ext1, 0, d);
      Tensor per_elem = reshape(slice_cols(ext1, d, d + 1), Shape{B});
      integral_value = reduce_rate(per_elem, integral->reduction).value();
    } else {
      auto [t, stats] = odeint::solve_terminal(field.f, z0, span, cfg);
      res.forward_stats = stats;
      z1 = std::move(t);
    }
  }

  // Terminal stage: seed adjoint and collect gradients of parameters the
  // loss touches directly (e.g. a readout head).
  Tensor a1 = Tensor::zeros({B, d});
  std::vector<Tensor> head_grads;
  head_grads.reserve(field.params.size());
  for (const auto& p : field.params) head_grads.push_back(Tensor::zeros(p.shape()));
  double terminal_value = 0.0;
  if (terminal) {
    autograd::EnableGradGuard on;
    Tensor z1l = z1.detach();
    z1l.set_requires_grad(true);
    Tensor L = terminal->fn(z1l);
    require_scalar_loss(L, "terminal");
    terminal_value = L.value();
    if (L.requires_grad()) {
      autograd::GradientMap gm = autograd::backward(L, false);
      a1 = gm.get(z1l);
      for (std::size_t i = 0; i < field.params.size(); ++i) {
        head_grads[i] = gm.get(field.params[i]);
      }
    }
  }
  res.loss = terminal_value + integral_value;

  // Backward sweep in u = s1 - s over the joint system (z, a, g_theta),
  // flattened into one row. Each evaluation rebuilds a one-step graph for
  // the two vector-Jacobian products and drops it immediately.
  const double T = span.length();
  std::vector<double> w0(2 * bd + P, 0.0);
  {
    const auto& zd = z1.data();
    const auto& ad = a1.data();
    std::copy(zd.begin(), zd.end(), w0.begin());
    std::copy(ad.begin(), ad.end(), w0.begin() + static_cast<std::ptrdiff_t>(bd));
  }
  Tensor winit = Tensor::from_data({1, 2 * bd + P}, std::move(w0));

  auto dynamics = [&](double u, const Tensor& w) -> Tensor {
    const double s = span.s1 - u;
    const auto& wd = w.data();
    Tensor a = Tensor::from_data({B, d}, std::vector<double>(wd.begin() + static_cast<std::ptrdiff_t>(bd),
                                                             wd.begin() + static_cast<std::ptrdiff_t>(2 * bd)));
    Tensor fz;
    Tensor da;
    std::vector<Tensor> pg;
    {
      autograd::EnableGradGuard on;
      Tensor zl = Tensor::from_data({B, d}, std::vector<double>(wd.begin(),
                                                                wd.begin() + static_cast<std::ptrdiff_t>(bd)));
      zl.set_requires_grad(true);
      fz = field.f(s, zl);
      if (fz.shape() != zl.shape()) {
        throw ShapeError("grad_adjoint: field output shape " + shape_str(fz.shape()) +
                         " does not match state shape " + shape_str(zl.shape()));
      }
      Tensor obj = sum(mul(a, fz));
      if (integral) {
        obj = add(obj, reduce_rate(integral->integrand(s, zl), integral->reduction));
      }
      if (obj.requires_grad()) {
        autograd::GradientMap gm = autograd::backward(obj, false);
        da = gm.get(zl);
        for (const auto& p : field.params) pg.push_back(gm.get(p));
      } else {
        da = Tensor::zeros({B, d});
        for (const auto& p : field.params) pg.push_back(Tensor::zeros(p.shape()));
      }
    }
    std::vector<double> out(2 * bd + P);
    const auto& fd = fz.data();
    const auto& dad = da.data();
    for (std::size_t i = 0; i < bd; ++i) out[i] = -fd[i];
    for (std::size_t i = 0; i < bd; ++i) out[bd + i] = dad[i];
    for (std::size_t i = 0; i < pg.size(); ++i) {
      const auto& g = pg[i].data();
      std::copy(g.begin(), g.end(), out.begin() + static_cast<std::ptrdiff_t>(2 * bd + offsets[i]));
    }
    return Tensor::from_data({1, 2 * bd + P}, std::move(out));
  };

  Tensor wT;
  {
    autograd::NoGradGuard off;
    odeint::SolverConfig bcfg = cfg;
    bcfg.error_ignore_trailing = 0;
    try {
      auto [t, stats] = odeint::solve_terminal(dynamics, winit, {0.0, T}, bcfg);
      res.backward_stats = stats;
      wT = std::move(t);
    } catch (const odeint::SolveError& e) {
      throw odeint::SolveError(std::string("adjoint backward pass: ") + e.what(), e.stats,
                               e.depth);
    }
  }

  const auto& wd = wT.data();
  res.input_grad = Tensor::from_data({B, d}, std::vector<double>(wd.begin() + static_cast<std::ptrdiff_t>(bd),
                                                                 wd.begin() + static_cast<std::ptrdiff_t>(2 * bd)));
  for (std::size_t i = 0; i < field.params.size(); ++i) {
    const auto& p = field.params[i];
    std::vector<double> g(wd.begin() + static_cast<std::ptrdiff_t>(2 * bd + offsets[i]),
                          wd.begin() + static_cast<std::ptrdiff_t>(2 * bd + offsets[i] + p.numel()));
    Tensor field_part = Tensor::from_data(p.shape(), std::move(g));
    res.param_grads.push_back(add(head_grads[i], field_part));
  }
  return res;
}

}  // namespace continua::sensitivity
