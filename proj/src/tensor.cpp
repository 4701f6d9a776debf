#include "continua/tensor.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "continua/autograd.hpp"

namespace continua {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->shape = {};
  impl_->data = {0.0};
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.impl_->data[0] = v;
  return t;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t;
  t.impl_->data.assign(shape_numel(shape), v);
  t.impl_->shape = std::move(shape);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " expects " +
                     std::to_string(shape_numel(shape)) + " elements, got " +
                     std::to_string(data.size()));
  }
  Tensor t;
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("extent: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return impl_->shape[axis];
}

std::vector<double>& Tensor::mutable_data() {
  if (impl_->node) throw Error("mutable_data: in-place mutation of a non-leaf tensor");
  return impl_->data;
}

double Tensor::value() const {
  if (numel() != 1) throw ShapeError("value: tensor of shape " + shape_str(shape()) + " is not scalar");
  return impl_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw ShapeError("at(row,col): tensor has shape " + shape_str(shape()));
  return impl_->data.at(row * impl_->shape[1] + col);
}

Tensor& Tensor::set_requires_grad(bool v) {
  if (impl_->node) throw Error("set_requires_grad: only leaf tensors may be marked");
  impl_->requires_grad = v;
  return *this;
}

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

bool Tensor::all_finite() const { return first_nonfinite() == static_cast<std::size_t>(-1); }

std::size_t Tensor::first_nonfinite() const {
  for (std::size_t i = 0; i < impl_->data.size(); ++i) {
    if (!std::isfinite(impl_->data[i])) return i;
  }
  return static_cast<std::size_t>(-1);
}

// --- broadcasting -----------------------------------------------------

namespace {

enum class Bc { same, a_scalar, b_scalar, a_rows, b_rows };

bool trailing_match(const Shape& big, const Shape& small) {
  if (big.size() != small.size() + 1) return false;
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (big[i + 1] != small[i]) return false;
  }
  return true;
}

Bc broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bc::same;
  if (b.numel() == 1) return Bc::b_scalar;
  if (a.numel() == 1) return Bc::a_scalar;
  if (trailing_match(a.shape(), b.shape())) return Bc::b_rows;
  if (trailing_match(b.shape(), a.shape())) return Bc::a_rows;
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " are not compatible (broadcasting is limited to the "
                   "batch-leading axis and scalar operands)");
}

// Reduce a cotangent of the broadcast result shape back to the operand shape.
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (shape_numel(target) == 1) return reshape(sum(g), target);
  return reshape(sum(g, 0), target);
}

template <typename F>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f,
                 autograd::Node::BackwardFn bw) {
  Bc kind = broadcast_kind(name, a, b);
  const Tensor& big = (kind == Bc::a_scalar || kind == Bc::a_rows) ? b : a;
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> out(big.numel());
  switch (kind) {
    case Bc::same:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i], bd[i]);
      break;
    case Bc::b_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i], bd[0]);
      break;
    case Bc::a_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[0], bd[i]);
      break;
    case Bc::b_rows: {
      const std::size_t stride = b.numel();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i], bd[i % stride]);
      break;
    }
    case Bc::a_rows: {
      const std::size_t stride = a.numel();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i % stride], bd[i]);
      break;
    }
  }
  return autograd::make_op(name, big.shape(), std::move(out), {a, b}, std::move(bw));
}

template <typename F>
Tensor unary_op(const char* name, const Tensor& a, F f, autograd::Node::BackwardFn bw) {
  const auto& ad = a.data();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  return autograd::make_op(name, a.shape(), std::move(out), {a}, std::move(bw));
}

double softplus_scalar(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// --- elementwise ops ---------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{reduce_to(g, in[0].shape()), reduce_to(g, in[1].shape())};
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{reduce_to(g, in[0].shape()), reduce_to(neg(g), in[1].shape())};
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{reduce_to(mul(g, in[1]), in[0].shape()),
                                   reduce_to(mul(g, in[0]), in[1].shape())};
      });
}

Tensor div(const Tensor& a, const Tensor& b) { return mul(a, reciprocal(b)); }

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; },
      [](const std::vector<Tensor>&, const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](const std::vector<Tensor>& in, const Tensor& g) {
        Tensor t = tanh(in[0]);
        return std::vector<Tensor>{mul(g, sub(Tensor::scalar(1.0), square(t)))};
      });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      "softplus", a, softplus_scalar,
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{mul(g, sigmoid(in[0]))};
      });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{mul(g, exp(in[0]))};
      });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{mul(g, reciprocal(in[0]))};
      });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{mul(g, mul(in[0], Tensor::scalar(2.0)))};
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a, sigmoid_scalar,
      [](const std::vector<Tensor>& in, const Tensor& g) {
        Tensor s = sigmoid(in[0]);
        return std::vector<Tensor>{mul(g, mul(s, sub(Tensor::scalar(1.0), s)))};
      });
}

Tensor reciprocal(const Tensor& a) {
  return unary_op(
      "reciprocal", a, [](double x) { return 1.0 / x; },
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{neg(mul(g, square(reciprocal(in[0]))))};
      });
}

const char* ew_op_name(EwOp op) {
  switch (op) {
    case EwOp::add: return "add";
    case EwOp::sub: return "sub";
    case EwOp::mul: return "mul";
    case EwOp::neg: return "neg";
    case EwOp::tanh: return "tanh";
    case EwOp::softplus: return "softplus";
    case EwOp::exp: return "exp";
    case EwOp::square: return "square";
    case EwOp::log: return "log";
    case EwOp::sigmoid: return "sigmoid";
    case EwOp::reciprocal: return "reciprocal";
  }
  return "?";
}

bool ew_op_is_binary(EwOp op) {
  return op == EwOp::add || op == EwOp::sub || op == EwOp::mul;
}

Tensor elementwise(EwOp op, const Tensor& a) {
  if (ew_op_is_binary(op)) {
    throw Error(std::string("elementwise: ") + ew_op_name(op) + " needs two operands");
  }
  switch (op) {
    case EwOp::neg: return neg(a);
    case EwOp::tanh: return tanh(a);
    case EwOp::softplus: return softplus(a);
    case EwOp::exp: return exp(a);
    case EwOp::square: return square(a);
    case EwOp::log: return log(a);
    case EwOp::sigmoid: return sigmoid(a);
    case EwOp::reciprocal: return reciprocal(a);
    default: throw Error("elementwise: bad op");
  }
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case EwOp::add: return add(a, b);
    case EwOp::sub: return sub(a, b);
    case EwOp::mul: return mul(a, b);
    default:
      throw Error(std::string("elementwise: ") + ew_op_name(op) + " takes one operand");
  }
}

// --- linear algebra -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
  if (k != k2) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &bd[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return autograd::make_op(
      "matmul", Shape{m, n}, std::move(out), {a, b},
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{matmul(g, transpose(in[1])), matmul(transpose(in[0]), g)};
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_str(a.shape()));
  const std::size_t r = a.extent(0), c = a.extent(1);
  std::vector<double> out(r * c);
  const auto& ad = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  }
  return autograd::make_op(
      "transpose", Shape{c, r}, std::move(out), {a},
      [](const std::vector<Tensor>&, const Tensor& g) {
        return std::vector<Tensor>{transpose(g)};
      });
}

// --- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return autograd::make_op(
      "sum", Shape{}, {acc}, {a},
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
      });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(a.shape()));
  }
  if (a.rank() == 1) return reshape(sum(a), Shape{});
  if (a.rank() != 2) throw ShapeError("sum: axis reduction supports rank <= 2");
  const std::size_t r = a.extent(0), c = a.extent(1);
  const auto& ad = a.data();
  if (axis == 0) {
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[j] += ad[i * c + j];
    }
    return autograd::make_op(
        "sum0", Shape{c}, std::move(out), {a},
        [](const std::vector<Tensor>& in, const Tensor& g) {
          return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
        });
  }
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i] += ad[i * c + j];
  }
  return autograd::make_op(
      "sum1", Shape{r}, std::move(out), {a},
      [c](const std::vector<Tensor>&, const Tensor& g) {
        return std::vector<Tensor>{expand_cols(g, c)};
      });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return mul(sum(a), Tensor::scalar(1.0 / static_cast<double>(a.numel())));
}

Tensor mean(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("mean: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(a.shape()));
  }
  const std::size_t extent = a.extent(axis);
  if (extent == 0) throw ShapeError("mean: axis " + std::to_string(axis) + " has extent 0");
  return mul(sum(a, axis), Tensor::scalar(1.0 / static_cast<double>(extent)));
}

// --- structure ------------------------------------------------------------

Tensor broadcast_to(const Tensor& a, Shape shape) {
  if (a.shape() == shape) return a;
  std::vector<double> out(shape_numel(shape));
  const auto& ad = a.data();
  if (a.numel() == 1) {
    std::fill(out.begin(), out.end(), ad[0]);
  } else if (trailing_match(shape, a.shape())) {
    const std::size_t stride = a.numel();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i % stride];
  } else {
    throw ShapeError("broadcast_to: cannot broadcast " + shape_str(a.shape()) + " to " +
                     shape_str(shape));
  }
  return autograd::make_op(
      "broadcast_to", std::move(shape), std::move(out), {a},
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{reduce_to(g, in[0].shape())};
      });
}

Tensor expand_cols(const Tensor& a, std::size_t n) {
  if (!(a.rank() == 1 || (a.rank() == 2 && a.extent(1) == 1))) {
    throw ShapeError("expand_cols: expects [B] or [Bx1], got " + shape_str(a.shape()));
  }
  const std::size_t rows = a.extent(0);
  std::vector<double> out(rows * n);
  const auto& ad = a.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = ad[i];
  }
  return autograd::make_op(
      "expand_cols", Shape{rows, n}, std::move(out), {a},
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{reshape(sum(g, 1), in[0].shape())};
      });
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2) throw ShapeError("slice_cols: expects rank-2, got " + shape_str(a.shape()));
  const std::size_t rows = a.extent(0), cols = a.extent(1);
  if (c0 > c1 || c1 > cols) {
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t w = c1 - c0;
  std::vector<double> out(rows * w);
  const auto& ad = a.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = ad[i * cols + c0 + j];
  }
  const std::size_t right = cols - c1;
  return autograd::make_op(
      "slice_cols", Shape{rows, w}, std::move(out), {a},
      [c0, right](const std::vector<Tensor>&, const Tensor& g) {
        return std::vector<Tensor>{pad_cols(g, c0, right)};
      });
}

Tensor pad_cols(const Tensor& a, std::size_t left, std::size_t right) {
  if (a.rank() != 2) throw ShapeError("pad_cols: expects rank-2, got " + shape_str(a.shape()));
  const std::size_t rows = a.extent(0), cols = a.extent(1);
  const std::size_t w = left + cols + right;
  std::vector<double> out(rows * w, 0.0);
  const auto& ad = a.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[i * w + left + j] = ad[i * cols + j];
  }
  return autograd::make_op(
      "pad_cols", Shape{rows, w}, std::move(out), {a},
      [left, cols](const std::vector<Tensor>&, const Tensor& g) {
        return std::vector<Tensor>{slice_cols(g, left, left + cols)};
      });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t rows = parts[0].extent(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.extent(0) != rows) {
      throw ShapeError("concat_cols: parts must be rank-2 with equal rows; got " +
                       shape_str(p.shape()) + " vs " + std::to_string(rows) + " rows");
    }
    cols += p.extent(1);
  }
  std::vector<double> out(rows * cols);
  std::size_t off = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const std::size_t w = p.extent(1);
    widths.push_back(w);
    const auto& pd = p.data();
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < w; ++j) out[i * cols + off + j] = pd[i * w + j];
    }
    off += w;
  }
  return autograd::make_op(
      "concat_cols", Shape{rows, cols}, std::move(out), parts,
      [widths](const std::vector<Tensor>&, const Tensor& g) {
        std::vector<Tensor> grads;
        std::size_t c = 0;
        for (std::size_t w : widths) {
          grads.push_back(slice_cols(g, c, c + w));
          c += w;
        }
        return grads;
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  }
  return autograd::make_op(
      "reshape", std::move(shape), a.data(), {a},
      [](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{reshape(g, in[0].shape())};
      });
}

}  // namespace continua
