#include "hdca/gradsuite.hpp"

#include <chrono>
#include <cmath>
#include <functional>

#include "hdca/gradcheck.hpp"
#include "hdca/hdca.hpp"
#include "hdca/ops.hpp"
#include "hdca/random.hpp"

namespace hdca {

bool GradCheckReport::passed() const { return failures().empty(); }

std::vector<std::string> GradCheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& c : cases) {
    if (!(c.max_relative_error < threshold)) out.push_back(c.name);
  }
  return out;
}

namespace {

using ops::Conv2dOptions;

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(seed, 0x67726164) {}

  Tensor uniform(Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape), DType::Float64);
    for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, rng_.uniform(lo, hi));
    return t;
  }
  /// Values bounded away from zero so relu kinks stay farther than eps.
  Tensor away_from_zero(Shape shape) {
    Tensor t(std::move(shape), DType::Float64);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double m = rng_.uniform(0.05, 1.0);
      t.set(i, rng_.bernoulli(0.5) ? m : -m);
    }
    return t;
  }

  void run(const std::string& name, const std::vector<Tensor>& inputs, const GraphBody& body,
           std::vector<Parameter*> params = {}) {
    const auto start = std::chrono::steady_clock::now();
    const double err = check_graph_gradients(inputs, params, body);
    const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
    report.cases.push_back({name, err, took.count()});
  }

  Rng& rng() { return rng_; }
  GradCheckReport report;

 private:
  Rng rng_;
};

LabelMap random_labels(std::size_t h, std::size_t w, int classes, Rng& rng) {
  LabelMap m(h, w);
  for (auto& v : m.values) v = rng.bernoulli(0.15) ? kIgnoreIndex : static_cast<std::uint8_t>(rng.integer(0, classes - 1));
  m.values[0] = 0;  // at least one valid pixel
  return m;
}

}  // namespace

GradCheckReport run_grad_check_suite(std::uint64_t seed, double threshold) {
  Suite s(seed);
  s.report.threshold = threshold;

  s.run("matmul", {s.uniform({3, 4}), s.uniform({4, 5})},
        [](Graph&, std::vector<Var>& v) { return ops::matmul(v[0], v[1]); });
  s.run("matmul (batched, transposed)", {s.uniform({2, 4, 3}), s.uniform({2, 5, 4})},
        [](Graph&, std::vector<Var>& v) { return ops::matmul(v[0], v[1], true, true); });

  s.run("conv2d 3x3", {s.uniform({2, 3, 5, 5}), s.uniform({4, 3, 3, 3}), s.uniform({4})},
        [](Graph&, std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2], Conv2dOptions{1, 1, 1}); });
  s.run("conv2d 3x3 dilated", {s.uniform({1, 2, 7, 7}), s.uniform({3, 2, 3, 3})},
        [](Graph&, std::vector<Var>& v) { return ops::conv2d(v[0], v[1], std::nullopt, Conv2dOptions{1, 2, 2}); });
  s.run("conv2d 3x3 stride 2", {s.uniform({1, 2, 6, 6}), s.uniform({3, 2, 3, 3}), s.uniform({3})},
        [](Graph&, std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2], Conv2dOptions{2, 1, 1}); });
  s.run("conv2d 1x1", {s.uniform({2, 4, 3, 3}), s.uniform({5, 4, 1, 1}), s.uniform({5})},
        [](Graph&, std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2]); });

  s.run("softmax_channels", {s.uniform({2, 4, 3, 3}, -3.0, 3.0)},
        [](Graph&, std::vector<Var>& v) { return ops::softmax_channels(v[0]); });
  s.run("bilinear_resize (up)", {s.uniform({1, 2, 3, 4})},
        [](Graph&, std::vector<Var>& v) { return ops::bilinear_resize(v[0], 7, 9); });
  s.run("bilinear_resize (down)", {s.uniform({2, 2, 8, 6})},
        [](Graph&, std::vector<Var>& v) { return ops::bilinear_resize(v[0], 3, 4); });
  s.run("concat_channels", {s.uniform({2, 2, 3, 3}), s.uniform({2, 3, 3, 3})}, [](Graph&, std::vector<Var>& v) {
    const Var parts[] = {v[0], v[1]};
    return ops::concat_channels(parts);
  });
  s.run("slice_channels", {s.uniform({2, 5, 3, 3})},
        [](Graph&, std::vector<Var>& v) { return ops::slice_channels(v[0], 1, 3); });

  for (auto mode : {ops::NormMode::Train, ops::NormMode::Eval}) {
    Tensor mean = s.uniform({3}, -0.5, 0.5);
    Tensor var = s.uniform({3}, 0.5, 1.5);
    const bool train = mode == ops::NormMode::Train;
    s.run(train ? "batch_norm (train)" : "batch_norm (eval)",
          {s.uniform({2, 3, 4, 4}, -2.0, 2.0), s.uniform({3}, 0.5, 1.5), s.uniform({3})},
          [mean, var, mode](Graph&, std::vector<Var>& v) mutable {
            Tensor m = mean, r = var;  // keep every evaluation on the same statistics
            return ops::batch_norm(v[0], v[1], v[2], m, r, ops::BatchNormOptions{mode, 0.1, 1e-5});
          });
  }

  s.run("relu", {s.away_from_zero({2, 3, 4, 4})}, [](Graph&, std::vector<Var>& v) { return ops::relu(v[0]); });
  s.run("add", {s.uniform({2, 3, 2}), s.uniform({2, 3, 2})},
        [](Graph&, std::vector<Var>& v) { return ops::add(v[0], v[1]); });
  s.run("mul", {s.uniform({2, 3, 2}), s.uniform({2, 3, 2})},
        [](Graph&, std::vector<Var>& v) { return ops::mul(v[0], v[1]); });
  s.run("scale", {s.uniform({4, 3})}, [](Graph&, std::vector<Var>& v) { return ops::scale(v[0], -1.7); });
  s.run("reduce_sum (axes)", {s.uniform({2, 3, 4})},
        [](Graph&, std::vector<Var>& v) { return ops::reduce_sum(v[0], {1}); });
  s.run("reduce_sum (all)", {s.uniform({2, 3, 4})},
        [](Graph&, std::vector<Var>& v) { return ops::reduce_sum(v[0]); });
  s.run("divide_rows", {s.uniform({2, 3, 4}), s.uniform({2, 3}, 0.5, 2.0)},
        [](Graph&, std::vector<Var>& v) { return ops::divide_rows(v[0], v[1], 1e-6); });
  s.run("reshape", {s.uniform({2, 3, 4})}, [](Graph&, std::vector<Var>& v) { return ops::reshape(v[0], {6, 4}); });
  s.run("linear", {s.uniform({2, 3, 4}), s.uniform({5, 4}), s.uniform({5})},
        [](Graph&, std::vector<Var>& v) { return ops::linear(v[0], v[1], v[2]); });

  std::vector<LabelMap> labels{random_labels(4, 5, 3, s.rng()), random_labels(4, 5, 3, s.rng())};
  s.run("cross_entropy", {s.uniform({2, 3, 4, 5}, -2.0, 2.0)}, [labels](Graph&, std::vector<Var>& v) {
    return ops::cross_entropy(v[0], labels, kIgnoreIndex);
  });

  // Whole two-level stack, differentiated with respect to X, X' and every weight.
  {
    ParameterSet params;
    HdcaConfig config;
    config.region_schedule = {2, 3};
    config.context_channels = 4;
    std::mt19937_64 init(seed + 17);
    HdcaStack stack(params, config, 8, 4, DType::Float64, init);
    for (Parameter* p : params.trainable()) {
      // Nonzero biases and off-unit BN affines exercise every term.
      if (p->value.rank() == 1) {
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value.set(i, p->value.at(i) + s.rng().uniform(-0.3, 0.3));
      }
    }
    s.run("forward_stack S_2={2,3}", {s.uniform({1, 8, 6, 6}), s.uniform({1, 4, 6, 6})},
          [&stack](Graph& g, std::vector<Var>& v) {
            return stack.forward(g, v[0], v[1], ops::NormMode::Train).pyramid;
          },
          params.trainable());
  }
  return s.report;
}

}  // namespace hdca
