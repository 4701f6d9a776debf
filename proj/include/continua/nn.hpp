#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "continua/rng.hpp"
#include "continua/tensor.hpp"

namespace continua::nn {

struct NamedParam {
  std::string name;
  Tensor tensor;  // shared handle onto the layer's leaf parameter
};

/// Base of all field parametrizations. forward receives the depth s so that
/// depth-aware layers can use it; depth-blind layers ignore it.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor forward(double s, const Tensor& x) const = 0;
  virtual std::string describe() const = 0;

  /// Appends (prefixed name, tensor) pairs in registration order.
  virtual void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const;

  std::vector<NamedParam> named_params() const;
  std::vector<Tensor> params() const;
  std::size_t param_count() const;
};

using LayerPtr = std::shared_ptr<Layer>;

class Linear : public Layer {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng);

  Tensor forward(double s, const Tensor& x) const override;
  std::string describe() const override;
  void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const override;

  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  std::size_t in_, out_;
  Tensor weight_;  // [out x in]
  Tensor bias_;    // [out]
};

class Tanh : public Layer {
 public:
  Tensor forward(double, const Tensor& x) const override { return continua::tanh(x); }
  std::string describe() const override { return "Tanh()"; }
};

class Softplus : public Layer {
 public:
  Tensor forward(double, const Tensor& x) const override { return continua::softplus(x); }
  std::string describe() const override { return "Softplus()"; }
};

/// Appends the current depth as an extra trailing column, so a following
/// Linear(d+1, ...) sees (z, s) per batch row.
class DepthCat : public Layer {
 public:
  Tensor forward(double s, const Tensor& x) const override;
  std::string describe() const override { return "DepthCat()"; }
};

/// Fourier basis over a depth span: 1, sin(2*pi*m*s/period), cos(2*pi*m*s/period)
/// for m = 1..n_terms; size() = 2*n_terms + 1.
struct FourierBasis {
  std::size_t n_terms = 0;
  double period = 1.0;

  std::size_t size() const { return 2 * n_terms + 1; }
  std::vector<double> eval(double s) const;
  /// Upper bound on |d psi_k / ds| for each basis function.
  std::vector<double> slope_bound() const;
};

/// Linear layer whose weight and bias are depth-dependent through a spectral
/// expansion: W(s) = sum_k psi_k(s) * C_k, b(s) likewise. The constant-term
/// coefficients start like a plain Linear; harmonics start at zero so the
/// field is depth-invariant at init and depth-variance is learned.
class GalLinear : public Layer {
 public:
  GalLinear(std::size_t in, std::size_t out, FourierBasis basis, Rng& rng);

  Tensor forward(double s, const Tensor& x) const override;
  std::string describe() const override;
  void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const override;

  /// Effective weight values at depth s, for probing continuity.
  Tensor weight_at(double s) const;
  Tensor bias_at(double s) const;
  const FourierBasis& basis() const { return basis_; }

 private:
  std::size_t in_, out_;
  FourierBasis basis_;
  std::vector<Tensor> w_coeff_;  // size() tensors of [out x in]
  std::vector<Tensor> b_coeff_;  // size() tensors of [out]
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  explicit Sequential(std::vector<LayerPtr> layers) : layers_(std::move(layers)) {}

  void append(LayerPtr layer) { layers_.push_back(std::move(layer)); }
  std::size_t size() const { return layers_.size(); }
  const LayerPtr& at(std::size_t i) const { return layers_.at(i); }

  Tensor forward(double s, const Tensor& x) const override;
  std::string describe() const override;
  void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const override;

 private:
  std::vector<LayerPtr> layers_;
};

/// Copies all parameter values into one flat vector, registration order.
Tensor flatten_params(const Layer& layer);
/// Writes a flat vector back into the parameters; length must match exactly.
void unflatten_params(Layer& layer, const Tensor& flat);

/// Checkpoints are a JSON list of {name, shape, data} with float64 values
/// that round-trip bit-exactly. Loading validates every entry before any
/// parameter is touched, so a corrupt file cannot partially load.
std::string checkpoint_dump(const Layer& layer);
void checkpoint_load_string(const Layer& layer, const std::string& text);
void save_checkpoint(const Layer& layer, const std::string& path);
void load_checkpoint(const Layer& layer, const std::string& path);

}  // namespace continua::nn
