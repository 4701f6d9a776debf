#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace continua {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown when operand shapes are incompatible; the message names both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace autograd {
struct Node;
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  // Differentiation nesting level: 0 for forward values, k for k-th
  // derivatives produced by backward(create_graph=true). Capped at 2.
  int grad_level = 0;
  std::shared_ptr<autograd::Node> node;
};

}  // namespace detail

/// Dense float64 tensor with batch-leading layout. Copying a Tensor copies a
/// handle; the underlying buffer is shared. A tensor is a leaf when it has no
/// grad node; only leaves may be mutated in place.
class Tensor {
 public:
  Tensor();  // scalar zero leaf

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from_data(Shape shape, std::vector<double> data);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t extent(std::size_t axis) const;

  const std::vector<double>& data() const { return impl_->data; }
  /// In-place access; rejected on non-leaf tensors (graph results are frozen).
  std::vector<double>& mutable_data();

  double value() const;  // scalar extract, rejects numel != 1
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v);
  bool is_leaf() const { return impl_->node == nullptr; }
  int grad_level() const { return impl_->grad_level; }

  /// Values-only copy detached from any graph.
  Tensor detach() const;

  bool all_finite() const;
  /// Flat index of the first non-finite element, or npos.
  std::size_t first_nonfinite() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// --- elementwise ops ---------------------------------------------------

enum class EwOp { add, sub, mul, neg, tanh, softplus, exp, square, log, sigmoid, reciprocal };

const char* ew_op_name(EwOp op);
bool ew_op_is_binary(EwOp op);

Tensor elementwise(EwOp op, const Tensor& a);
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // a * reciprocal(b)
Tensor neg(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor reciprocal(const Tensor& a);

// --- linear algebra -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// --- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

// --- structure ------------------------------------------------------------

/// Scalar -> any shape, or [d] -> [n x d] across a new leading axis.
Tensor broadcast_to(const Tensor& a, Shape shape);
/// [B] or [Bx1] -> [B x n], replicating along columns.
Tensor expand_cols(const Tensor& a, std::size_t n);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor pad_cols(const Tensor& a, std::size_t left, std::size_t right);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);

// --- operators --------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }

}  // namespace continua
