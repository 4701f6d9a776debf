#include "continua/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <optional>
#include <unordered_set>

namespace continua::autograd {

namespace {

thread_local bool g_grad_enabled = true;
// Minimum grad level stamped on ops recorded during a create_graph backward
// sweep; 0 outside of one.
thread_local int g_level_floor = 0;

std::atomic<std::size_t> g_live_nodes{0};
std::atomic<std::size_t> g_peak_nodes{0};

// Deferred-release queue so tearing down a long op chain does not recurse
// one stack frame per node.
thread_local std::vector<Tensor> g_teardown_queue;
thread_local bool g_tearing_down = false;

struct LevelFloorGuard {
  int prev;
  explicit LevelFloorGuard(int floor) : prev(g_level_floor) { g_level_floor = floor; }
  ~LevelFloorGuard() { g_level_floor = prev; }
};

}  // namespace

Node::Node(const char* op_name, int lvl, int own, std::vector<Tensor> ins, BackwardFn fn)
    : op(op_name), level(lvl), own_level(own), inputs(std::move(ins)), backward(std::move(fn)) {
  const std::size_t live = ++g_live_nodes;
  std::size_t peak = g_peak_nodes.load();
  while (live > peak && !g_peak_nodes.compare_exchange_weak(peak, live)) {
  }
}

Node::~Node() {
  --g_live_nodes;
  if (inputs.empty()) return;
  for (auto& t : inputs) g_teardown_queue.push_back(std::move(t));
  inputs.clear();
  if (g_tearing_down) return;
  g_tearing_down = true;
  while (!g_teardown_queue.empty()) {
    Tensor victim = std::move(g_teardown_queue.back());
    g_teardown_queue.pop_back();
    // releasing `victim` here may re-enter ~Node, which only enqueues
  }
  g_tearing_down = false;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

EnableGradGuard::EnableGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = prev_; }

std::size_t live_nodes() { return g_live_nodes.load(); }
std::size_t peak_nodes() { return g_peak_nodes.load(); }
void reset_peak_nodes() { g_peak_nodes.store(g_live_nodes.load()); }

bool GradientMap::contains(const Tensor& t) const {
  return grads_.find(t.impl().get()) != grads_.end();
}

Tensor GradientMap::get(const Tensor& t) const {
  auto it = grads_.find(t.impl().get());
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return it->second;
}

void GradientMap::accumulate(const Tensor& t, const Tensor& g) {
  if (g.shape() != t.shape()) {
    throw ShapeError("gradient of shape " + shape_str(g.shape()) +
                     " accumulated for tensor of shape " + shape_str(t.shape()));
  }
  auto it = grads_.find(t.impl().get());
  if (it == grads_.end()) {
    grads_.emplace(t.impl().get(), g);
    keepalive_.push_back(t.impl());
  } else {
    it->second = add(it->second, g);
  }
}

Tensor make_op(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               Node::BackwardFn fn) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (g_grad_enabled) {
    bool needs = false;
    int level = g_level_floor;
    for (const auto& t : inputs) {
      if (t.requires_grad()) {
        needs = true;
        level = std::max(level, t.grad_level());
      }
    }
    if (needs) {
      impl->requires_grad = true;
      impl->grad_level = level;
      impl->node =
          std::make_shared<Node>(op, level, g_level_floor, std::move(inputs), std::move(fn));
    }
  }
  return Tensor::wrap(std::move(impl));
}

GradientMap backward(const Tensor& root, bool create_graph, const std::vector<Tensor>& stop_at) {
  if (root.numel() != 1) {
    throw Error("backward: root must be scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    throw Error("backward: root does not participate in differentiation");
  }
  if (root.grad_level() >= 2) {
    throw Error("backward: nested differentiation depth limit (2) exceeded");
  }

  std::unordered_set<const detail::TensorImpl*> stops;
  for (const Tensor& t : stop_at) stops.insert(t.impl().get());

  // Reverse DFS post-order is a topological order: every consumer is
  // processed before the tensors it reads. Iterative so graph depth is not
  // bounded by the call stack. Stop tensors are never pushed, so neither
  // their rule nor their ancestors' rules ever run.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<const detail::TensorImpl*> seen;
  {
    struct Frame {
      std::shared_ptr<detail::TensorImpl> impl;
      std::size_t next_child = 0;
    };
    std::vector<Frame> stack;
    seen.insert(root.impl().get());
    if (stops.find(root.impl().get()) == stops.end()) {
      stack.push_back({root.impl()});
    }
    while (!stack.empty()) {
      Frame& f = stack.back();
      const Node* node = f.impl->node.get();
      const std::size_t n_in = node ? node->inputs.size() : 0;
      bool descended = false;
      while (f.next_child < n_in) {
        const Tensor& child = node->inputs[f.next_child++];
        if (!child.requires_grad()) continue;
        if (stops.find(child.impl().get()) != stops.end()) continue;
        if (seen.insert(child.impl().get()).second) {
          stack.push_back({child.impl()});
          descended = true;
          break;
        }
      }
      if (!descended) {
        order.push_back(std::move(stack.back().impl));
        stack.pop_back();
      }
    }
  }

  GradientMap grads;
  grads.accumulate(root, Tensor::ones(root.shape()));

  // Without create_graph the sweep runs in value mode: rule outputs carry no
  // nodes, so adjoint-style loops can discard each local graph wholesale.
  std::optional<NoGradGuard> value_mode;
  if (!create_graph) value_mode.emplace();
  const int entry_floor = g_level_floor;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& impl = *it;
    if (!impl->node) continue;
    Tensor self = Tensor::wrap(impl);
    if (!grads.contains(self)) continue;
    Tensor gout = grads.get(self);
    // Differentiating through a node created in layer k produces layer-k+1
    // ops; plain forward nodes yield layer entry_floor+1 however deep the
    // levels of the values they consume are. This keeps repeated first-order
    // probes (divergence, energy gradients) at level 1 while genuine
    // grad-of-grad chains still climb to the cap.
    LevelFloorGuard rule_floor(std::max(entry_floor + 1, impl->node->own_level + 1));
    std::vector<Tensor> input_grads = impl->node->backward(impl->node->inputs, gout);
    if (input_grads.size() != impl->node->inputs.size()) {
      throw Error(std::string("backward: rule for ") + impl->node->op + " returned " +
                  std::to_string(input_grads.size()) + " gradients for " +
                  std::to_string(impl->node->inputs.size()) + " inputs");
    }
    for (std::size_t i = 0; i < input_grads.size(); ++i) {
      const Tensor& in = impl->node->inputs[i];
      if (!in.requires_grad()) continue;
      grads.accumulate(in, input_grads[i]);
    }
  }

  return grads;
}

}  // namespace continua::autograd
