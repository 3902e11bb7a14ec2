#include "hdca/graph.hpp"

#include <utility>

namespace hdca {

namespace {

struct FaultState {
  std::string op;
  double factor = 1.0;
  bool active = false;
};

FaultState& fault_state() {
  static thread_local FaultState state;
  return state;
}

}  // namespace

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::variable(Tensor value) {
  Node n;
  n.op = "variable";
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Var Graph::parameter(Parameter& param) {
  Node n;
  n.op = "parameter";
  n.value = param.value;
  n.requires_grad = grad_enabled_ && param.trainable;
  n.param = &param;
  return push(std::move(n));
}

Var Graph::record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
                  BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (nodes_.at(in.id).requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape(), n.value.dtype());
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.has_grad) return n.grad;
  return Tensor::zeros(n.value.shape(), n.value.dtype());
}

void Graph::backward(Var loss) {
  const Node& root = nodes_.at(loss.id);
  if (root.value.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(root.value.shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_buffer(loss).fill(1.0);

  const FaultState& fault = fault_state();
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    if (fault.active && n.op == fault.op) {
      Tensor corrupted = n.grad;
      corrupted.scale_inplace(fault.factor);
      n.backward(*this, corrupted);
    } else {
      n.backward(*this, n.grad);
    }
  }

  for (Node& n : nodes_) {
    if (n.param == nullptr || !n.param->trainable) continue;
    n.param->grad = n.has_grad ? n.grad : Tensor::zeros(n.value.shape(), n.value.dtype());
  }
}

namespace testing {

BackwardFault::BackwardFault(std::string op, double factor) {
  auto& s = fault_state();
  s.op = std::move(op);
  s.factor = factor;
  s.active = true;
}

BackwardFault::~BackwardFault() { fault_state() = FaultState{}; }

}  // namespace testing

}  // namespace hdca
