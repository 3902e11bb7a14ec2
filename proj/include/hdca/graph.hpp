#pragma once

// Reverse-mode automatic differentiation over an append-only operation record.

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "hdca/parameters.hpp"
#include "hdca/tensor.hpp"

namespace hdca {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  DType dtype() const { return value().dtype(); }
};

/// Computation record. Nodes are appended in execution order, so every node's
/// inputs precede it. One graph per forward pass; not shared across threads.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient but is not tied to a parameter.
  Var variable(Tensor value);
  /// Leaf bound to a parameter. Trainable parameters get their grad written by backward().
  Var parameter(Parameter& param);

  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient from the last backward(); zeros for nodes the loss does not reach.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the record in reverse. Overwrites the grad
  /// of every trainable parameter bound to this graph. Forward values are untouched.
  void backward(Var loss);

  // Used by operation implementations.
  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn);
  /// Mutable gradient accumulator for an input during backward; allocated on first use.
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

namespace testing {

/// While alive, scales the incoming gradient of every node recorded under `op`
/// by `factor` during backward. Used to check that gradient checks catch broken rules.
class BackwardFault {
 public:
  BackwardFault(std::string op, double factor);
  ~BackwardFault();
  BackwardFault(const BackwardFault&) = delete;
  BackwardFault& operator=(const BackwardFault&) = delete;
};

}  // namespace testing

}  // namespace hdca
