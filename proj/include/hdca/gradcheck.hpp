#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hdca/graph.hpp"
#include "hdca/parameters.hpp"
#include "hdca/tensor.hpp"

namespace hdca {

using ScalarFunction = std::function<double(const Tensor&)>;

/// Central differences (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps) for every element of x.
Tensor finite_difference_grad(const ScalarFunction& f, const Tensor& x, double eps = 1e-5);

/// Elementwise |a-b| / max(|a|, |b|, floor), maximized over the tensor.
double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-3);

using GraphBody = std::function<Var(Graph&, std::vector<Var>& inputs)>;

struct GradientCheckOptions {
  double eps = 1e-5;
  double floor = 1e-3;
  std::uint64_t probe_seed = 99;
};

/// Builds `body` on fresh graphs, contracts its output with fixed random
/// weights to a scalar, and returns the worst relative error between autodiff
/// and central differences over every input tensor and every listed parameter.
/// The body binds the parameters itself through Graph::parameter.
double check_graph_gradients(const std::vector<Tensor>& inputs, std::span<Parameter* const> params,
                             const GraphBody& body, const GradientCheckOptions& options = {});

}  // namespace hdca
