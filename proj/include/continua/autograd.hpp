#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "continua/tensor.hpp"

namespace continua::autograd {

/// One record on the tape: the operation id, handles to its inputs (which keep
/// the upstream graph alive) and the rule producing input cotangents from the
/// output cotangent. Rules are built from tensor ops so they can themselves be
/// recorded when a nested derivative is requested.
struct Node {
  using BackwardFn =
      std::function<std::vector<Tensor>(const std::vector<Tensor>& inputs, const Tensor& grad_out)>;

  const char* op;
  int level;      // max differentiation layer anywhere in this subgraph
  int own_level;  // layer this op itself was created in (0 = forward pass)
  std::vector<Tensor> inputs;
  BackwardFn backward;

  Node(const char* op_name, int lvl, int own, std::vector<Tensor> ins, BackwardFn fn);
  ~Node();

  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool prev_;
};

// Live/peak node accounting, used to check the memory contract of the
// adjoint method (retained nodes stay flat as step counts grow).
std::size_t live_nodes();
std::size_t peak_nodes();
void reset_peak_nodes();

/// Result of a backward pass: accumulated cotangents keyed by tensor identity.
class GradientMap {
 public:
  bool contains(const Tensor& t) const;
  /// Accumulated gradient of the root w.r.t. t; zeros of t's shape when t was
  /// not reached by the backward sweep.
  Tensor get(const Tensor& t) const;
  std::size_t size() const { return grads_.size(); }

  void accumulate(const Tensor& t, const Tensor& g);

 private:
  std::unordered_map<const detail::TensorImpl*, Tensor> grads_;
  std::vector<std::shared_ptr<detail::TensorImpl>> keepalive_;
};

/// Reverse-mode sweep from a scalar root. Visits each node once in reverse
/// topological order; gradients accumulate additively over fan-out. With
/// create_graph the sweep is itself recorded, enabling one more level of
/// differentiation (two levels total; deeper nesting is rejected).
///
/// Tensors in stop_at are treated as leaves for this sweep: their cotangents
/// still accumulate, but the traversal does not continue into their history.
/// Probes that only need d(root)/d(stop tensor) stay O(local subgraph) even
/// when the probed value sits deep inside a recorded solve.
GradientMap backward(const Tensor& root, bool create_graph = false,
                     const std::vector<Tensor>& stop_at = {});

/// Records an op result on the tape when recording is active and any input
/// participates in differentiation.
Tensor make_op(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               Node::BackwardFn fn);

}  // namespace continua::autograd
