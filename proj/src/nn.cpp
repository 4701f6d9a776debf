#include "continua/nn.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "continua/autograd.hpp"

namespace continua::nn {

void Layer::collect_params(const std::string&, std::vector<NamedParam>&) const {}

std::vector<NamedParam> Layer::named_params() const {
  std::vector<NamedParam> out;
  collect_params("", out);
  return out;
}

std::vector<Tensor> Layer::params() const {
  std::vector<Tensor> out;
  for (auto& np : named_params()) out.push_back(np.tensor);
  return out;
}

std::size_t Layer::param_count() const {
  std::size_t n = 0;
  for (auto& np : named_params()) n += np.tensor.numel();
  return n;
}

// --- Linear ---------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, Rng& rng) : in_(in), out_(out) {
  if (in == 0 || out == 0) throw ShapeError("Linear: zero extent");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = rand_uniform(rng, {out, in}, -bound, bound);
  weight_.set_requires_grad(true);
  bias_ = Tensor::zeros({out});
  bias_.set_requires_grad(true);
}

Tensor Linear::forward(double, const Tensor& x) const {
  if (x.rank() != 2 || x.extent(1) != in_) {
    throw ShapeError("Linear(" + std::to_string(in_) + ", " + std::to_string(out_) +
                     "): input has shape " + shape_str(x.shape()));
  }
  return add(matmul(x, transpose(weight_)), bias_);
}

std::string Linear::describe() const {
  return "Linear(in=" + std::to_string(in_) + ", out=" + std::to_string(out_) + ")";
}

void Linear::collect_params(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + "weight", weight_});
  out.push_back({prefix + "bias", bias_});
}

// --- DepthCat ---------------------------------------------------------------

Tensor DepthCat::forward(double s, const Tensor& x) const {
  if (x.rank() != 2) {
    throw ShapeError("DepthCat: expects a rank-2 input, got " + shape_str(x.shape()));
  }
  return concat_cols({x, Tensor::full({x.extent(0), 1}, s)});
}

// --- FourierBasis -----------------------------------------------------------

std::vector<double> FourierBasis::eval(double s) const {
  std::vector<double> psi;
  psi.reserve(size());
  psi.push_back(1.0);
  const double w0 = 2.0 * 3.14159265358979323846 / period;
  for (std::size_t m = 1; m <= n_terms; ++m) {
    psi.push_back(std::sin(w0 * static_cast<double>(m) * s));
    psi.push_back(std::cos(w0 * static_cast<double>(m) * s));
  }
  return psi;
}

std::vector<double> FourierBasis::slope_bound() const {
  std::vector<double> b;
  b.reserve(size());
  b.push_back(0.0);
  const double w0 = 2.0 * 3.14159265358979323846 / period;
  for (std::size_t m = 1; m <= n_terms; ++m) {
    b.push_back(w0 * static_cast<double>(m));
    b.push_back(w0 * static_cast<double>(m));
  }
  return b;
}

// --- GalLinear ----------------------------------------------------------------

GalLinear::GalLinear(std::size_t in, std::size_t out, FourierBasis basis, Rng& rng)
    : in_(in), out_(out), basis_(basis) {
  if (in == 0 || out == 0) throw ShapeError("GalLinear: zero extent");
  if (basis_.period <= 0.0) throw Error("GalLinear: basis period must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (std::size_t k = 0; k < basis_.size(); ++k) {
    Tensor w = (k == 0) ? rand_uniform(rng, {out, in}, -bound, bound) : Tensor::zeros({out, in});
    w.set_requires_grad(true);
    w_coeff_.push_back(w);
    Tensor b = Tensor::zeros({out});
    b.set_requires_grad(true);
    b_coeff_.push_back(b);
  }
}

Tensor GalLinear::forward(double s, const Tensor& x) const {
  if (x.rank() != 2 || x.extent(1) != in_) {
    throw ShapeError("GalLinear(" + std::to_string(in_) + ", " + std::to_string(out_) +
                     "): input has shape " + shape_str(x.shape()));
  }
  const auto psi = basis_.eval(s);
  Tensor w = mul(w_coeff_[0], Tensor::scalar(psi[0]));
  Tensor b = mul(b_coeff_[0], Tensor::scalar(psi[0]));
  for (std::size_t k = 1; k < psi.size(); ++k) {
    w = add(w, mul(w_coeff_[k], Tensor::scalar(psi[k])));
    b = add(b, mul(b_coeff_[k], Tensor::scalar(psi[k])));
  }
  return add(matmul(x, transpose(w)), b);
}

Tensor GalLinear::weight_at(double s) const {
  autograd::NoGradGuard off;
  const auto psi = basis_.eval(s);
  Tensor w = mul(w_coeff_[0], Tensor::scalar(psi[0]));
  for (std::size_t k = 1; k < psi.size(); ++k) {
    w = add(w, mul(w_coeff_[k], Tensor::scalar(psi[k])));
  }
  return w;
}

Tensor GalLinear::bias_at(double s) const {
  autograd::NoGradGuard off;
  const auto psi = basis_.eval(s);
  Tensor b = mul(b_coeff_[0], Tensor::scalar(psi[0]));
  for (std::size_t k = 1; k < psi.size(); ++k) {
    b = add(b, mul(b_coeff_[k], Tensor::scalar(psi[k])));
  }
  return b;
}

std::string GalLinear::describe() const {
  return "GalLinear(in=" + std::to_string(in_) + ", out=" + std::to_string(out_) +
         ", harmonics=" + std::to_string(basis_.n_terms) + ")";
}

void GalLinear::collect_params(const std::string& prefix, std::vector<NamedParam>& out) const {
  for (std::size_t k = 0; k < w_coeff_.size(); ++k) {
    out.push_back({prefix + "weight" + std::to_string(k), w_coeff_[k]});
  }
  for (std::size_t k = 0; k < b_coeff_.size(); ++k) {
    out.push_back({prefix + "bias" + std::to_string(k), b_coeff_[k]});
  }
}

// --- Sequential -----------------------------------------------------------------

Tensor Sequential::forward(double s, const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      h = layers_[i]->forward(s, h);
    } catch (const ShapeError& e) {
      throw ShapeError("sequential: layer " + std::to_string(i) + " (" + layers_[i]->describe() +
                       "): " + e.what());
    }
  }
  return h;
}

std::string Sequential::describe() const {
  std::ostringstream os;
  os << "Sequential(";
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i) os << ", ";
    os << layers_[i]->describe();
  }
  os << ")";
  return os.str();
}

void Sequential::collect_params(const std::string& prefix, std::vector<NamedParam>& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->collect_params(prefix + std::to_string(i) + ".", out);
  }
}

// --- parameter flattening ----------------------------------------------------

Tensor flatten_params(const Layer& layer) {
  std::vector<double> flat;
  for (const auto& np : layer.named_params()) {
    const auto& d = np.tensor.data();
    flat.insert(flat.end(), d.begin(), d.end());
  }
  const std::size_t total = flat.size();
  return Tensor::from_data({total}, std::move(flat));
}

void unflatten_params(Layer& layer, const Tensor& flat) {
  auto params = layer.named_params();
  std::size_t total = 0;
  for (const auto& np : params) total += np.tensor.numel();
  if (flat.numel() != total) {
    throw ShapeError("unflatten_params: layer has " + std::to_string(total) +
                     " parameter elements, vector has " + std::to_string(flat.numel()));
  }
  const auto& src = flat.data();
  std::size_t off = 0;
  for (auto& np : params) {
    auto& dst = np.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[off + i];
    off += dst.size();
  }
}

// --- checkpoints ------------------------------------------------------------

std::string checkpoint_dump(const Layer& layer) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& np : layer.named_params()) {
    nlohmann::json e;
    e["name"] = np.name;
    e["shape"] = np.tensor.shape();
    e["data"] = np.tensor.data();
    entries.push_back(std::move(e));
  }
  nlohmann::json root;
  root["format"] = "continua-checkpoint-v1";
  root["params"] = std::move(entries);
  return root.dump(2);
}

void checkpoint_load_string(const Layer& layer, const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: parse failure: ") + e.what());
  }
  if (!root.is_object() || root.value("format", "") != "continua-checkpoint-v1" ||
      !root.contains("params") || !root["params"].is_array()) {
    throw Error("checkpoint: not a continua-checkpoint-v1 document");
  }

  auto params = layer.named_params();
  const auto& entries = root["params"];
  if (entries.size() != params.size()) {
    throw Error("checkpoint: holds " + std::to_string(entries.size()) + " tensors, model has " +
                std::to_string(params.size()));
  }

  // Validate everything first; only then mutate, so a bad file loads nothing.
  std::vector<std::vector<double>> staged;
  staged.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    if (!e.is_object() || !e.contains("name") || !e.contains("shape") || !e.contains("data")) {
      throw Error("checkpoint: entry " + std::to_string(i) + " is malformed");
    }
    if (e["name"].get<std::string>() != params[i].name) {
      throw Error("checkpoint: entry " + std::to_string(i) + " is named '" +
                  e["name"].get<std::string>() + "', model expects '" + params[i].name + "'");
    }
    Shape shape = e["shape"].get<Shape>();
    if (shape != params[i].tensor.shape()) {
      throw Error("checkpoint: parameter '" + params[i].name + "' has shape " + shape_str(shape) +
                  ", model expects " + shape_str(params[i].tensor.shape()));
    }
    std::vector<double> data = e["data"].get<std::vector<double>>();
    if (data.size() != params[i].tensor.numel()) {
      throw Error("checkpoint: parameter '" + params[i].name + "' holds " +
                  std::to_string(data.size()) + " values, expects " +
                  std::to_string(params[i].tensor.numel()));
    }
    staged.push_back(std::move(data));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].tensor.mutable_data() = std::move(staged[i]);
  }
}

void save_checkpoint(const Layer& layer, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("checkpoint: cannot open '" + path + "' for writing");
  f << checkpoint_dump(layer);
  if (!f.good()) throw Error("checkpoint: write to '" + path + "' failed");
}

void load_checkpoint(const Layer& layer, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("checkpoint: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << f.rdbuf();
  checkpoint_load_string(layer, buf.str());
}

}  // namespace continua::nn
