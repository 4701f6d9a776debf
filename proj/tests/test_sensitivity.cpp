#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "continua/autograd.hpp"
#include "continua/nn.hpp"
#include "continua/odeint.hpp"
#include "continua/rng.hpp"
#include "continua/sensitivity.hpp"
#include "continua/tensor.hpp"
#include "test_support.hpp"

using namespace continua;
using testsup::close;
namespace oi = continua::odeint;
namespace se = continua::sensitivity;

namespace {

oi::SolverConfig rk4_cfg(double h) {
  oi::SolverConfig cfg;
  cfg.method = oi::Method::rk4;
  cfg.h_init = h;
  return cfg;
}

// f(s, z) = theta * z with a single scalar parameter.
struct ScalarGrowth {
  Tensor theta;

  explicit ScalarGrowth(double value) : theta(Tensor::from_data({1}, {value})) {
    theta.set_requires_grad(true);
  }

  se::ParamField field() {
    Tensor th = theta;
    return {[th](double, const Tensor& z) { return mul(z, th); }, {theta}};
  }
};

const se::TerminalLoss kSumLoss{[](const Tensor& z1) { return sum(z1); }};

se::ParamField mlp_field(const std::shared_ptr<nn::Sequential>& net) {
  return {[net](double s, const Tensor& z) { return net->forward(s, z); }, net->params()};
}

// Loss evaluated without recording, for finite differencing. Fixed-step
// configs keep the discretization independent of the parameter value.
double plain_loss(const se::ParamField& field, const Tensor& z0, oi::DepthSpan span,
                  const oi::SolverConfig& cfg,
                  const std::function<Tensor(const Tensor&)>& loss_fn) {
  autograd::NoGradGuard off;
  auto [z1, stats] = oi::solve_terminal(field.f, z0, span, cfg);
  return loss_fn(z1).value();
}

}  // namespace

TEST_CASE("zero growth rate: both methods recover the unit closed forms") {
  for (bool adjoint : {false, true}) {
    ScalarGrowth model(0.0);
    se::ParamField field = model.field();
    Tensor z0 = Tensor::ones({1, 1});
    auto res = adjoint
                   ? se::grad_adjoint(field, z0, {0.0, 1.0}, rk4_cfg(1e-3), kSumLoss)
                   : se::grad_backprop(field, z0, {0.0, 1.0}, rk4_cfg(1e-3), kSumLoss);
    INFO("adjoint = ", adjoint);
    CHECK(close(res.loss, 1.0, 1e-9));                   // z(1) = e^0
    CHECK(close(res.param_grads[0].at(0), 1.0, 1e-5));   // d z(1)/d theta = e^theta
    CHECK(close(res.input_grad.at(0, 0), 1.0, 1e-5));    // d z(1)/d z0 = e^theta
    CHECK(res.forward_stats.nfe > 0);
    if (adjoint) CHECK(res.backward_stats.nfe > 0);
  }
}

TEST_CASE("exponential parameter gradient tracks e^theta") {
  for (double theta : {0.5, 1.0}) {
    ScalarGrowth model(theta);
    se::ParamField field = model.field();
    Tensor z0 = Tensor::ones({1, 1});
    const double expect = std::exp(theta);
    auto bp = se::grad_backprop(field, z0, {0.0, 1.0}, rk4_cfg(1e-3), kSumLoss);
    CHECK(close(bp.loss, expect, 1e-6));
    CHECK(close(bp.param_grads[0].at(0), expect, 1e-4));
    auto ad = se::grad_adjoint(field, z0, {0.0, 1.0}, rk4_cfg(1e-3), kSumLoss);
    CHECK(close(ad.param_grads[0].at(0), expect, 1e-3));
    CHECK(close(ad.input_grad.at(0, 0), expect, 1e-3));
  }
}

TEST_CASE("loss blind to the dynamics: parameter gradients are exactly zero") {
  for (bool adjoint : {false, true}) {
    ScalarGrowth model(0.7);  // present but unused by the field below
    se::ParamField field{[](double, const Tensor& z) { return Tensor::zeros(z.shape()); },
                         {model.theta}};
    Tensor z0 = Tensor::from_data({1, 1}, {2.5});
    auto res = adjoint
                   ? se::grad_adjoint(field, z0, {0.0, 1.0}, rk4_cfg(0.1), kSumLoss)
                   : se::grad_backprop(field, z0, {0.0, 1.0}, rk4_cfg(0.1), kSumLoss);
    INFO("adjoint = ", adjoint);
    CHECK(res.loss == 2.5);
    CHECK(res.param_grads[0].at(0) == 0.0);
    CHECK(res.input_grad.at(0, 0) == 1.0);
  }
}

TEST_CASE("both methods match finite differences in every parameter coordinate") {
  Rng rng(31);
  auto net = testsup::make_mlp(2, 8, 2, rng);
  se::ParamField field = mlp_field(net);
  Tensor z0 = randn(rng, {2, 2});
  const auto cfg = rk4_cfg(0.01);
  const oi::DepthSpan span{0.0, 1.0};
  const se::TerminalLoss loss{[](const Tensor& z1) { return sum(square(z1)); }};

  auto bp = se::grad_backprop(field, z0, span, cfg, loss);
  auto ad = se::grad_adjoint(field, z0, span, cfg, loss);

  auto eval = [&]() {
    return plain_loss(field, z0, span, cfg,
                      [](const Tensor& z1) { return sum(square(z1)); });
  };
  std::size_t coords = 0;
  for (std::size_t pi = 0; pi < field.params.size(); ++pi) {
    Tensor p = field.params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i, ++coords) {
      const double fd = testsup::fd_coord(eval, p, i);
      INFO("param ", pi, " coord ", i);
      CHECK(close(bp.param_grads[pi].at(i), fd, 1e-3, 1e-7));
      CHECK(close(ad.param_grads[pi].at(i), fd, 1e-3, 1e-7));
    }
  }
  CHECK(coords >= 10);
  for (std::size_t i = 0; i < z0.numel(); ++i) {
    const double fd = testsup::fd_coord(eval, z0, i);
    CHECK(close(bp.input_grad.at(i), fd, 1e-3, 1e-7));
    CHECK(close(ad.input_grad.at(i), fd, 1e-3, 1e-7));
  }
}

TEST_CASE("adjoint agrees with backprop on twenty random models") {
  const oi::DepthSpan span{0.0, 1.0};
  const auto cfg = rk4_cfg(1e-3);
  const se::TerminalLoss loss{[](const Tensor& z1) { return mean(square(z1)); }};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const std::size_t d = 1 + static_cast<std::size_t>(seed % 4);
    const std::size_t hidden = 4 + 2 * static_cast<std::size_t>(seed % 3);
    auto net = testsup::make_mlp(d, hidden, d, rng);
    CHECK(net->param_count() <= 500);
    se::ParamField field = mlp_field(net);
    Tensor z0 = randn(rng, {3, d});

    auto bp = se::grad_backprop(field, z0, span, cfg, loss);
    auto ad = se::grad_adjoint(field, z0, span, cfg, loss);
    CHECK(close(bp.loss, ad.loss, 1e-9, 1e-12));
    for (std::size_t pi = 0; pi < field.params.size(); ++pi) {
      for (std::size_t i = 0; i < field.params[pi].numel(); ++i) {
        INFO("seed ", seed, " param ", pi, " coord ", i);
        CHECK(close(bp.param_grads[pi].at(i), ad.param_grads[pi].at(i), 1e-3, 1e-8));
      }
    }
    for (std::size_t i = 0; i < z0.numel(); ++i) {
      CHECK(close(bp.input_grad.at(i), ad.input_grad.at(i), 1e-3, 1e-8));
    }
  }
}

TEST_CASE("integral loss: closed-form value and derivative of int z^2 ds") {
  // With f = theta*z and z0 = 1: integral = (e^{2 theta} - 1) / (2 theta),
  // derivative (e^{2 theta}(2 theta - 1) + 1) / (2 theta^2).
  const se::IntegralLoss l2{[](double, const Tensor& z) { return sum(square(z), 1); },
                            se::IntegralLoss::Reduction::sum};
  const auto cfg = rk4_cfg(1e-3);
  const oi::DepthSpan span{0.0, 1.0};
  const double e2 = std::exp(2.0);

  for (double theta : {0.5, 1.0}) {
    const double ell = (std::exp(2.0 * theta) - 1.0) / (2.0 * theta);
    const double dell =
        (std::exp(2.0 * theta) * (2.0 * theta - 1.0) + 1.0) / (2.0 * theta * theta);

    ScalarGrowth model(theta);
    se::ParamField field = model.field();
    Tensor z0 = Tensor::ones({1, 1});

    auto bp = se::grad_backprop(field, z0, span, cfg, {}, l2);
    CHECK(close(bp.loss, ell, 1e-4));
    CHECK(close(bp.param_grads[0].at(0), dell, 1e-3));

    // oracle for the discretized gradient: finite difference of the
    // discretized loss itself
    const double delta = 1e-5;
    auto loss_at = [&](double th) {
      ScalarGrowth m(th);
      return se::grad_backprop(m.field(), z0, span, cfg, {}, l2).loss;
    };
    const double fd = (loss_at(theta + delta) - loss_at(theta - delta)) / (2.0 * delta);
    CHECK(close(bp.param_grads[0].at(0), fd, 1e-4));

    auto ad = se::grad_adjoint(field, z0, span, cfg, {}, l2);
    CHECK(close(ad.loss, ell, 1e-4));
    CHECK(close(ad.param_grads[0].at(0), dell, 1e-3));
    auto adjoint_loss_at = [&](double th) {
      ScalarGrowth m(th);
      return se::grad_adjoint(m.field(), z0, span, cfg, {}, l2).loss;
    };
    const double fda =
        (adjoint_loss_at(theta + delta) - adjoint_loss_at(theta - delta)) / (2.0 * delta);
    CHECK(close(ad.param_grads[0].at(0), fda, 1e-3));
  }

  // spot values at theta = 1: integral (e^2-1)/2, derivative (e^2+1)/2
  CHECK(close((e2 - 1.0) / 2.0, 3.194528, 1e-6, 1e-6));
  CHECK(close((e2 + 1.0) / 2.0, 4.194528, 1e-6, 1e-6));
  // and at theta = 0.5 the derivative collapses to exactly 2
  CHECK((std::exp(1.0) * 0.0 + 1.0) / (2.0 * 0.25) == 2.0);
}

TEST_CASE("zero integrand reduces to the plain outputs exactly") {
  Rng rng(41);
  auto net = testsup::make_mlp(2, 6, 2, rng);
  se::ParamField field = mlp_field(net);
  Tensor z0 = randn(rng, {2, 2});
  const auto cfg = rk4_cfg(0.05);
  const oi::DepthSpan span{0.0, 1.0};
  const se::IntegralLoss zero{
      [](double, const Tensor& z) { return Tensor::zeros({z.extent(0)}); },
      se::IntegralLoss::Reduction::mean};

  for (bool adjoint : {false, true}) {
    auto plain = adjoint ? se::grad_adjoint(field, z0, span, cfg, kSumLoss)
                         : se::grad_backprop(field, z0, span, cfg, kSumLoss);
    auto with0 = adjoint ? se::grad_adjoint(field, z0, span, cfg, kSumLoss, zero)
                         : se::grad_backprop(field, z0, span, cfg, kSumLoss, zero);
    INFO("adjoint = ", adjoint);
    CHECK(plain.loss == with0.loss);
    for (std::size_t pi = 0; pi < field.params.size(); ++pi) {
      for (std::size_t i = 0; i < field.params[pi].numel(); ++i) {
        CHECK(plain.param_grads[pi].at(i) == with0.param_grads[pi].at(i));
      }
    }
    for (std::size_t i = 0; i < z0.numel(); ++i) {
      CHECK(plain.input_grad.at(i) == with0.input_grad.at(i));
    }
  }
}

TEST_CASE("kinetic-energy integrand: methods agree on the gradient") {
  Rng rng(43);
  auto net = testsup::make_mlp(2, 8, 2, rng);
  se::ParamField field = mlp_field(net);
  Tensor z0 = randn(rng, {3, 2});
  const auto cfg = rk4_cfg(1e-3);
  const oi::DepthSpan span{0.0, 1.0};
  const se::IntegralLoss kinetic{
      [net](double s, const Tensor& z) { return sum(square(net->forward(s, z)), 1); },
      se::IntegralLoss::Reduction::mean};

  auto bp = se::grad_backprop(field, z0, span, cfg, {}, kinetic);
  auto ad = se::grad_adjoint(field, z0, span, cfg, {}, kinetic);
  CHECK(bp.loss > 0.0);
  CHECK(close(bp.loss, ad.loss, 1e-6));
  for (std::size_t pi = 0; pi < field.params.size(); ++pi) {
    for (std::size_t i = 0; i < field.params[pi].numel(); ++i) {
      INFO("param ", pi, " coord ", i);
      CHECK(close(bp.param_grads[pi].at(i), ad.param_grads[pi].at(i), 1e-3, 1e-8));
    }
  }
}

// Scaling the loss by a power of two must scale every gradient exactly:
// exponent shifts commute with all the arithmetic either method performs.
TEST_CASE("gradient of a scaled loss is the scaled gradient, exactly") {
  Rng rng(47);
  auto net = testsup::make_mlp(2, 6, 2, rng);
  se::ParamField field = mlp_field(net);
  Tensor z0 = randn(rng, {2, 2});
  const auto cfg = rk4_cfg(0.05);
  const double alpha = 4.0;
  const se::TerminalLoss scaled{[alpha](const Tensor& z1) {
    return mul(Tensor::scalar(alpha), sum(square(z1)));
  }};
  const se::TerminalLoss base{[](const Tensor& z1) { return sum(square(z1)); }};

  for (bool adjoint : {false, true}) {
    auto g1 = adjoint ? se::grad_adjoint(field, z0, {0.0, 1.0}, cfg, base)
                      : se::grad_backprop(field, z0, {0.0, 1.0}, cfg, base);
    auto ga = adjoint ? se::grad_adjoint(field, z0, {0.0, 1.0}, cfg, scaled)
                      : se::grad_backprop(field, z0, {0.0, 1.0}, cfg, scaled);
    INFO("adjoint = ", adjoint);
    CHECK(ga.loss == alpha * g1.loss);
    for (std::size_t pi = 0; pi < field.params.size(); ++pi) {
      for (std::size_t i = 0; i < field.params[pi].numel(); ++i) {
        CHECK(ga.param_grads[pi].at(i) == alpha * g1.param_grads[pi].at(i));
      }
    }
  }
}

TEST_CASE("adjoint memory stays flat while backprop's tape grows with steps") {
  Rng rng(53);
  auto net = testsup::make_mlp(2, 8, 2, rng);
  se::ParamField field = mlp_field(net);
  Tensor z0 = randn(rng, {2, 2});
  const se::TerminalLoss loss{[](const Tensor& z1) { return sum(square(z1)); }};

  auto peak_adjoint = [&](double h) {
    autograd::reset_peak_nodes();
    se::grad_adjoint(field, z0, {0.0, 1.0}, rk4_cfg(h), loss);
    return autograd::peak_nodes();
  };
  auto peak_backprop = [&](double h) {
    autograd::reset_peak_nodes();
    se::grad_backprop(field, z0, {0.0, 1.0}, rk4_cfg(h), loss);
    return autograd::peak_nodes();
  };

  const std::size_t a10 = peak_adjoint(0.1);     // 10 steps
  const std::size_t a100 = peak_adjoint(0.01);   // 100 steps
  const std::size_t a1000 = peak_adjoint(0.001); // 1000 steps
  CHECK(a100 <= a10 + 4);
  CHECK(a1000 <= a10 + 4);

  const std::size_t b10 = peak_backprop(0.1);
  const std::size_t b100 = peak_backprop(0.01);
  CHECK(b100 > 5 * b10);
  CHECK(a1000 < b100);
}

TEST_CASE("backward-pass failures are labeled; forward ones are not") {
  // terminal gradient is infinite at z1 = 0, so the backward sweep starts
  // from a non-finite adjoint and must fail inside the backward solve
  se::ParamField zero_field{[](double, const Tensor& z) { return Tensor::zeros(z.shape()); }, {}};
  const se::TerminalLoss bad{[](const Tensor& z1) { return sum(reciprocal(z1)); }};
  try {
    se::grad_adjoint(zero_field, Tensor::zeros({1, 1}), {0.0, 1.0}, rk4_cfg(0.1), bad);
    FAIL("expected backward failure");
  } catch (const oi::SolveError& e) {
    CHECK(std::string(e.what()).find("adjoint backward pass: ") == 0);
  }

  // forward blowup surfaces as the solver's own error, unprefixed
  se::ParamField explode{[](double, const Tensor& z) { return square(z); }, {}};
  Tensor big = Tensor::full({1, 1}, 2.0);
  try {
    se::grad_adjoint(explode, big, {0.0, 1.0}, rk4_cfg(1e-3), kSumLoss);
    FAIL("expected forward failure");
  } catch (const oi::SolveError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("adjoint backward pass") == std::string::npos);
    CHECK(msg.find("non-finite") != std::string::npos);
  }
  CHECK_THROWS_AS(se::grad_backprop(explode, big, {0.0, 1.0}, rk4_cfg(1e-3), kSumLoss),
                  oi::SolveError);
}

TEST_CASE("a loss must be supplied") {
  se::ParamField f{[](double, const Tensor& z) { return z; }, {}};
  CHECK_THROWS_AS(se::grad_backprop(f, Tensor::ones({1, 1}), {0.0, 1.0}, rk4_cfg(0.1), {}),
                  Error);
  CHECK_THROWS_AS(se::grad_adjoint(f, Tensor::ones({1, 1}), {0.0, 1.0}, rk4_cfg(0.1), {}),
                  Error);
}
