#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "hdca/synthdata.hpp"
#include "hdca/training.hpp"
#include "test_util.hpp"

namespace hdca {
namespace {

// ---- poly_lr ----

TEST(PolyLrTest, BoundaryValuesAreExact) {
  EXPECT_EQ(poly_lr(0, 2000, 0.01), 0.01);
  EXPECT_EQ(poly_lr(2000, 2000, 0.01), 0.0);
}

TEST(PolyLrTest, HalfwayValue) {
  EXPECT_NEAR(poly_lr(1000, 2000, 0.001), 0.001 * std::pow(0.5, 0.9), 1e-15);
  EXPECT_NEAR(poly_lr(1000, 2000, 0.001), 5.358867312681466e-4, 1e-15);
}

TEST(PolyLrTest, StrictlyDecreasing) {
  double prev = poly_lr(0, 500, 0.05);
  for (std::int64_t i = 1; i <= 500; ++i) {
    const double lr = poly_lr(i, 500, 0.05);
    ASSERT_LT(lr, prev) << "iter " << i;
    prev = lr;
  }
}

TEST(PolyLrTest, RejectsOutOfRangeIterations) {
  EXPECT_THROW(poly_lr(-1, 10, 0.1), std::invalid_argument);
  EXPECT_THROW(poly_lr(11, 10, 0.1), std::invalid_argument);
}

// ---- sgd ----

OptimizerState plain_optimizer(double momentum, double wd, double lr, std::int64_t iter_max = 1000000) {
  OptimizerState s;
  s.momentum = momentum;
  s.weight_decay = wd;
  s.base_lr = lr;
  s.iter_max = iter_max;
  return s;
}

TEST(SgdTest, ZeroGradientZeroVelocityIsAFixedPoint) {
  ParameterSet params;
  Parameter& p = params.add("w", Tensor::from({3}, {1.0, -2.0, 0.5}, DType::Float64));
  p.grad = Tensor::zeros({3}, DType::Float64);
  OptimizerState s = plain_optimizer(0.9, 0.0, 0.1);
  sgd_step(params, s);
  EXPECT_EQ(p.value.to_vector(), (std::vector<double>{1.0, -2.0, 0.5}));
  EXPECT_EQ(s.iter, 1);
}

TEST(SgdTest, VanillaStepSubtractsScaledGradient) {
  ParameterSet params;
  Parameter& p = params.add("w", Tensor::from({2}, {1.0, 3.0}, DType::Float64));
  p.grad = Tensor::from({2}, {0.5, -0.25}, DType::Float64);
  OptimizerState s = plain_optimizer(0.0, 0.0, 0.1);
  const double lr = sgd_step(params, s);
  EXPECT_EQ(lr, 0.1);
  EXPECT_EQ(p.value.at(0), 1.0 - 0.1 * 0.5);
  EXPECT_EQ(p.value.at(1), 3.0 - 0.1 * -0.25);
}

TEST(SgdTest, NonTrainableEntriesAreUntouched) {
  ParameterSet params;
  Parameter& p = params.add("running", Tensor::from({1}, {4.0}, DType::Float64), false);
  p.grad = Tensor::from({1}, {1.0}, DType::Float64);
  OptimizerState s = plain_optimizer(0.0, 0.1, 0.1);
  sgd_step(params, s);
  EXPECT_EQ(p.value.at(0), 4.0);
}

TEST(SgdTest, TwoStepsOnScalarQuadraticMatchRecurrence) {
  // f(w) = 0.5*a*(w-b)^2, grad a*(w-b).
  const double a = 3.0, b = 0.7, mu = 0.9, wd = 0.01, base = 0.05;
  const std::int64_t iter_max = 10;
  ParameterSet params;
  Parameter& p = params.add("w", Tensor::from({1}, {2.0}, DType::Float64));
  OptimizerState s = plain_optimizer(mu, wd, base, iter_max);

  double w = 2.0, v = 0.0;
  for (int k = 0; k < 2; ++k) {
    p.grad = Tensor::from({1}, {a * (p.value.at(0) - b)}, DType::Float64);
    sgd_step(params, s);
    const double lr = base * std::pow(1.0 - static_cast<double>(k) / iter_max, 0.9);
    v = mu * v + a * (w - b) + wd * w;
    w -= lr * v;
    EXPECT_NEAR(p.value.at(0), w, 1e-10);
    EXPECT_NEAR(s.velocity.at("w").at(0), v, 1e-10);
  }
}

TEST(SgdTest, SmallStepsReduceConvexQuadratic) {
  // f(w) = 0.5 * w^T A w with A diagonal positive.
  const std::vector<double> diag{1.0, 4.0, 9.0};
  ParameterSet params;
  Parameter& p = params.add("w", Tensor::from({3}, {1.0, -1.0, 0.5}, DType::Float64));
  OptimizerState s = plain_optimizer(0.0, 0.0, 1e-3);
  auto loss = [&] {
    double f = 0.0;
    for (std::size_t i = 0; i < 3; ++i) f += 0.5 * diag[i] * p.value.at(i) * p.value.at(i);
    return f;
  };
  double prev = loss();
  for (int k = 0; k < 50; ++k) {
    std::vector<double> g(3);
    for (std::size_t i = 0; i < 3; ++i) g[i] = diag[i] * p.value.at(i);
    p.grad = Tensor::from({3}, g, DType::Float64);
    sgd_step(params, s);
    const double f = loss();
    ASSERT_LT(f, prev);
    prev = f;
  }
}

TEST(SgdTest, VelocityShapeMismatchIsRejected) {
  ParameterSet params;
  Parameter& p = params.add("w", Tensor::zeros({2}, DType::Float64));
  p.grad = Tensor::zeros({2}, DType::Float64);
  OptimizerState s = plain_optimizer(0.9, 0.0, 0.1);
  s.velocity["w"] = Tensor::zeros({3}, DType::Float64);
  EXPECT_THROW(sgd_step(params, s), std::exception);
}

// ---- augmentation ----

SceneSample coordinate_probe(std::size_t h, std::size_t w) {
  // Channel 0 tags the row, channel 1 the column; label i encodes pixel i.
  SceneSample s{Tensor::zeros({3, h, w}), LabelMap(h, w)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      s.image.set(y * w + x, (y + 1) / 64.0);
      s.image.set(h * w + y * w + x, (x + 1) / 64.0);
      s.image.set(2 * h * w + y * w + x, 1.0);
      s.labels.at(y, x) = static_cast<std::uint8_t>(y * w + x);
    }
  }
  return s;
}

TEST(AugmentTest, UnitScaleNoFlipFullCropIsIdentity) {
  SceneSpec spec;
  spec.seed = 3;
  const SceneSample s = generate_scene(spec, 0);
  AugmentOptions opts;
  opts.min_scale = opts.max_scale = 1.0;
  opts.flip_probability = 0.0;
  opts.crop = 64;
  Rng rng(1, 2);
  const SceneSample out = augment(s, rng, opts);
  EXPECT_TRUE(out.image == s.image);
  EXPECT_EQ(out.labels, s.labels);
}

TEST(AugmentTest, FlipTwiceRestoresOriginal) {
  SceneSpec spec;
  spec.seed = 4;
  const SceneSample s = generate_scene(spec, 1);
  const AugmentGeometry g{1.0, true, 0, 0};
  const SceneSample twice = apply_augmentation(apply_augmentation(s, g, 64), g, 64);
  EXPECT_TRUE(twice.image == s.image);
  EXPECT_EQ(twice.labels, s.labels);
}

TEST(AugmentTest, LabelsKeepOriginalValuesPlusIgnore) {
  SceneSpec spec;
  spec.seed = 5;
  AugmentOptions opts;
  for (std::uint64_t i = 0; i < 30; ++i) {
    const SceneSample s = generate_scene(spec, i);
    std::set<std::uint8_t> allowed(s.labels.values.begin(), s.labels.values.end());
    allowed.insert(kIgnoreIndex);
    Rng rng(9, i);
    const SceneSample out = augment(s, rng, opts);
    EXPECT_EQ(out.image.shape(), (Shape{3, 64, 64}));
    for (auto v : out.labels.values) ASSERT_TRUE(allowed.count(v)) << int(v);
  }
}

TEST(AugmentTest, LabelsMoveWithTheirPixels) {
  const SceneSample probe = coordinate_probe(12, 12);
  for (std::uint64_t i = 0; i < 40; ++i) {
    Rng rng(21, i);
    AugmentOptions opts;
    opts.min_scale = opts.max_scale = 1.0;
    opts.crop = i % 2 ? 8 : 16;  // smaller than the probe, and padded
    const AugmentGeometry g = draw_augmentation(12, 12, opts, rng);
    const SceneSample out = apply_augmentation(probe, g, opts.crop);
    const std::size_t c = opts.crop, plane = c * c;
    for (std::size_t y = 0; y < c; ++y) {
      for (std::size_t x = 0; x < c; ++x) {
        const std::uint8_t label = out.labels.at(y, x);
        const double row_tag = out.image.at(y * c + x);
        const double col_tag = out.image.at(plane + y * c + x);
        if (label == kIgnoreIndex) {
          EXPECT_EQ(out.image.at(2 * plane + y * c + x), 0.0);
          continue;
        }
        EXPECT_NEAR(row_tag * 64.0 - 1.0, label / 12, 1e-5);
        EXPECT_NEAR(col_tag * 64.0 - 1.0, label % 12, 1e-5);
      }
    }
  }
}

TEST(AugmentTest, RescaledLabelsStayNearTheirPixels) {
  const SceneSample probe = coordinate_probe(12, 12);
  const AugmentGeometry g{2.0, true, 3, 5};
  const SceneSample out = apply_augmentation(probe, g, 16);
  for (std::size_t y = 0; y < 16; ++y) {
    for (std::size_t x = 0; x < 16; ++x) {
      const std::uint8_t label = out.labels.at(y, x);
      ASSERT_NE(label, kIgnoreIndex);
      EXPECT_NEAR(out.image.at(y * 16 + x) * 64.0 - 1.0, label / 12, 1.0);
      EXPECT_NEAR(out.image.at(256 + y * 16 + x) * 64.0 - 1.0, label % 12, 1.0);
    }
  }
}

TEST(AugmentTest, DrawnGeometryStaysInRange) {
  AugmentOptions opts;
  for (std::uint64_t i = 0; i < 200; ++i) {
    Rng rng(4, i);
    const AugmentGeometry g = draw_augmentation(64, 64, opts, rng);
    ASSERT_GE(g.scale, 0.5);
    ASSERT_LT(g.scale, 2.0);
    ASSERT_LE(g.offset_y + 64, std::max<std::size_t>(scaled_size(64, g.scale), 64));
    ASSERT_LE(g.offset_x + 64, std::max<std::size_t>(scaled_size(64, g.scale), 64));
  }
  opts.crop = 60;
  Rng rng(0, 0);
  EXPECT_THROW(draw_augmentation(64, 64, opts, rng), std::invalid_argument);
}

// ---- metrics ----

LabelMap map_of(std::size_t h, std::size_t w, std::vector<std::uint8_t> v) {
  LabelMap m(h, w);
  m.values = std::move(v);
  return m;
}

TEST(MetricsTest, PerfectPredictionScoresOne) {
  MetricAccumulator acc(4);
  const LabelMap t = map_of(2, 3, {0, 1, 2, 3, 3, 1});
  acc.add(t, t);
  EXPECT_EQ(acc.mean_iou(), 1.0);
  EXPECT_EQ(acc.pixel_accuracy(), 1.0);
  EXPECT_EQ(acc.total(), 6u);
}

TEST(MetricsTest, SingleClassPredictionOnBalancedTwoClassData) {
  MetricAccumulator acc(2);
  acc.add(map_of(2, 2, {0, 0, 0, 0}), map_of(2, 2, {0, 1, 0, 1}));
  const auto iou = acc.class_iou();
  ASSERT_TRUE(iou[0] && iou[1]);
  EXPECT_DOUBLE_EQ(*iou[0], 0.5);
  EXPECT_DOUBLE_EQ(*iou[1], 0.0);
  EXPECT_DOUBLE_EQ(acc.mean_iou(), 0.25);
  EXPECT_DOUBLE_EQ(acc.pixel_accuracy(), 0.5);
}

TEST(MetricsTest, IgnoredPixelsDoNotCount) {
  const LabelMap truth = map_of(1, 4, {0, kIgnoreIndex, 1, kIgnoreIndex});
  MetricAccumulator a(2), b(2);
  a.add(map_of(1, 4, {0, 0, 1, 0}), truth);
  b.add(map_of(1, 4, {0, 1, 1, 1}), truth);
  EXPECT_EQ(a.total(), 2u);
  EXPECT_EQ(a.mean_iou(), b.mean_iou());
  EXPECT_EQ(a.pixel_accuracy(), b.pixel_accuracy());
  EXPECT_EQ(a.class_iou(), b.class_iou());
}

TEST(MetricsTest, AbsentClassesAreLeftOutOfTheMean) {
  MetricAccumulator acc(3);
  acc.add(map_of(1, 2, {0, 1}), map_of(1, 2, {0, 0}));
  const auto iou = acc.class_iou();
  EXPECT_FALSE(iou[2].has_value());
  EXPECT_DOUBLE_EQ(acc.mean_iou(), (0.5 + 0.0) / 2.0);
}

TEST(MetricsTest, ShapeMismatchIsRejected) {
  MetricAccumulator acc(2);
  EXPECT_THROW(acc.add(LabelMap(2, 2), LabelMap(2, 3)), std::exception);
}

// ---- training loop ----

ModelConfig tiny_model(std::uint64_t seed) {
  ModelConfig c;
  c.hdca.region_schedule = {2};
  c.init_seed = seed;
  return c;
}

std::vector<SceneSample> tiny_corpus(std::size_t n, std::size_t size = 32) {
  SceneSpec spec;
  spec.height = spec.width = size;
  spec.seed = 31;
  std::vector<SceneSample> data;
  for (std::size_t i = 0; i < n; ++i) data.push_back(generate_scene(spec, i));
  return data;
}

TrainConfig tiny_train(std::int64_t iters, std::uint64_t seed) {
  TrainConfig c;
  c.iterations = iters;
  c.seed = seed;
  c.batch_size = 2;
  c.augmentation.crop = 32;
  return c;
}

TEST(TrainTest, FixedSeedGivesBitIdenticalLog) {
  const auto data = tiny_corpus(4);
  const TrainConfig cfg = tiny_train(6, 5);
  std::vector<std::string> logs[2];
  for (auto& log : logs) {
    SegModel model(tiny_model(5));
    OptimizerState state = make_optimizer(cfg);
    for (const auto& e : train(model, data, cfg, state).log) log.push_back(format_log_line(e));
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_EQ(logs[0].size(), 6u);
}

TEST(TrainTest, LoggedLearningRateFollowsPolySchedule) {
  const auto data = tiny_corpus(2);
  const TrainConfig cfg = tiny_train(8, 1);
  SegModel model(tiny_model(1));
  OptimizerState state = make_optimizer(cfg);
  const auto result = train(model, data, cfg, state);
  ASSERT_EQ(result.log.size(), 8u);
  for (const auto& e : result.log) {
    EXPECT_NEAR(e.lr, 0.01 * std::pow(1.0 - e.iter / 8.0, 0.9), 1e-12);
  }
  EXPECT_EQ(result.log.front().lr, 0.01);
  EXPECT_EQ(state.iter, 8);
}

TEST(TrainTest, SmoothedLossDecreasesAcrossSeeds) {
  const auto data = tiny_corpus(4);
  const int iters = 10;
  std::vector<std::vector<double>> curves;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    TrainConfig cfg = tiny_train(iters, seed);
    cfg.augment = false;
    cfg.batch_size = 4;
    SegModel model(tiny_model(seed));
    OptimizerState state = make_optimizer(cfg);
    std::vector<double> loss;
    for (const auto& e : train(model, data, cfg, state).log) loss.push_back(e.loss);
    curves.push_back(loss);
  }
  // Median over seeds, then a trailing 3-iteration moving average.
  std::vector<double> median(iters);
  for (int i = 0; i < iters; ++i) {
    double v[3] = {curves[0][i], curves[1][i], curves[2][i]};
    std::sort(v, v + 3);
    median[i] = v[1];
  }
  std::vector<double> smooth;
  for (int i = 2; i < iters; ++i) smooth.push_back((median[i - 2] + median[i - 1] + median[i]) / 3.0);
  for (std::size_t i = 1; i < smooth.size(); ++i) {
    EXPECT_LE(smooth[i], smooth[i - 1]) << "window ending at iter " << i + 2;
  }
  EXPECT_LT(smooth.back(), median.front());
}

TEST(TrainTest, InvariantChecksRunEveryIteration) {
  const auto data = tiny_corpus(2);
  TrainConfig cfg = tiny_train(3, 2);
  cfg.check_invariants = true;
  SegModel model(tiny_model(2));
  OptimizerState state = make_optimizer(cfg);
  const auto result = train(model, data, cfg, state);
  EXPECT_GT(result.invariants.checks, 0);
  EXPECT_LE(result.invariants.worst_row_sum_error, 1e-6);
  EXPECT_LE(result.invariants.worst_conservation_relative, 1e-4);
}

TEST(TrainTest, CheckpointHookFiresOnSchedule) {
  const auto data = tiny_corpus(2);
  TrainConfig cfg = tiny_train(5, 3);
  cfg.checkpoint_every = 2;
  SegModel model(tiny_model(3));
  OptimizerState state = make_optimizer(cfg);
  std::vector<std::int64_t> fired;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](std::int64_t done, const OptimizerState& s) {
    EXPECT_EQ(s.iter, done);
    fired.push_back(done);
  };
  train(model, data, cfg, state, hooks);
  EXPECT_EQ(fired, (std::vector<std::int64_t>{2, 4}));
}

TEST(TrainTest, EmptyDatasetIsRejected) {
  SegModel model(tiny_model(0));
  const TrainConfig cfg = tiny_train(1, 0);
  OptimizerState state = make_optimizer(cfg);
  EXPECT_THROW(train(model, {}, cfg, state), TrainingError);
}

TEST(TrainTest, DivergenceAbortsWithDiagnostics) {
  const auto data = tiny_corpus(2);
  TrainConfig cfg = tiny_train(20, 4);
  cfg.base_lr = 1e12;
  SegModel model(tiny_model(4));
  OptimizerState state = make_optimizer(cfg);
  try {
    train(model, data, cfg, state);
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at iter"), std::string::npos) << e.what();
  }
}

TEST(TrainConfigTest, ValidationRejectsBadValues) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.augmentation.crop = 30;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

// ---- evaluation ----

TEST(EvaluateTest, PermutationInvariantOverDatasetOrder) {
  auto data = tiny_corpus(4);
  SegModel model(tiny_model(6));
  const EvalResult a = evaluate(model, data);
  std::reverse(data.begin(), data.end());
  const EvalResult b = evaluate(model, data);
  EXPECT_EQ(a.mean_iou, b.mean_iou);
  EXPECT_EQ(a.pixel_accuracy, b.pixel_accuracy);
  EXPECT_EQ(a.pixels, 4u * 32u * 32u);
}

TEST(EvaluateTest, TrainingBeatsUntrainedModelOnTrainingSet) {
  const auto data = tiny_corpus(4);
  SegModel untrained(tiny_model(7));
  const double before = evaluate(untrained, data).mean_iou;
  SegModel model(tiny_model(7));
  TrainConfig cfg = tiny_train(60, 7);
  cfg.augment = false;
  OptimizerState state = make_optimizer(cfg);
  train(model, data, cfg, state);
  EXPECT_GT(evaluate(model, data).mean_iou, before);
}

}  // namespace
}  // namespace hdca
