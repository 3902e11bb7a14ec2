#include "hdca/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "hdca/ops.hpp"
#include "hdca/random.hpp"

namespace hdca {

Tensor finite_difference_grad(const ScalarFunction& f, const Tensor& x, double eps) {
  Tensor probe = x;
  Tensor grad(x.shape(), x.dtype());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double original = x.at(i);
    probe.set(i, original + eps);
    const double up = f(probe);
    probe.set(i, original - eps);
    const double down = f(probe);
    probe.set(i, original);
    grad.set(i, (up - down) / (2.0 * eps));
  }
  return grad;
}

double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  require_same_shape(analytic, numeric, "max_relative_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double a = analytic.at(i);
    const double n = numeric.at(i);
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

double check_graph_gradients(const std::vector<Tensor>& inputs, std::span<Parameter* const> params,
                             const GraphBody& body, const GradientCheckOptions& options) {
  std::optional<Tensor> probe;
  auto evaluate = [&](Graph& g, const std::vector<Tensor>& xs, std::vector<Var>& vars) {
    vars.clear();
    for (const auto& x : xs) vars.push_back(g.variable(x));
    Var out = body(g, vars);
    if (!probe) {
      Rng rng(options.probe_seed, 0);
      probe = Tensor(out.shape(), out.dtype());
      for (std::size_t i = 0; i < probe->numel(); ++i) probe->set(i, rng.uniform(-1.0, 1.0));
    }
    return ops::reduce_sum(ops::mul(out, g.constant(*probe)));
  };
  auto scalar_at = [&](const std::vector<Tensor>& xs) {
    Graph g;
    std::vector<Var> vars;
    return evaluate(g, xs, vars).value().at(0);
  };

  Graph g;
  std::vector<Var> vars;
  g.backward(evaluate(g, inputs, vars));

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor& xi) {
      std::vector<Tensor> xs = inputs;
      xs[i] = xi;
      return scalar_at(xs);
    };
    worst = std::max(worst, max_relative_error(g.grad(vars[i]), finite_difference_grad(f, inputs[i], options.eps),
                                               options.floor));
  }
  for (Parameter* p : params) {
    const Tensor analytic = p->grad;
    const Tensor original = p->value;
    auto f = [&](const Tensor& v) {
      p->value = v;
      return scalar_at(inputs);
    };
    const Tensor numeric = finite_difference_grad(f, original, options.eps);
    p->value = original;
    worst = std::max(worst, max_relative_error(analytic, numeric, options.floor));
  }
  return worst;
}

}  // namespace hdca
