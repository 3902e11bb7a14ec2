#include "hdca/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <utility>

namespace hdca {

double poly_lr(std::int64_t iter, std::int64_t iter_max, double base_lr, double power) {
  if (iter_max <= 0) throw std::invalid_argument("poly_lr: iter_max must be positive");
  if (iter < 0 || iter > iter_max) {
    throw std::invalid_argument("poly_lr: iter " + std::to_string(iter) + " outside [0, " +
                                std::to_string(iter_max) + "]");
  }
  if (iter == iter_max) return 0.0;
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(iter_max), power);
}

double sgd_step(ParameterSet& params, OptimizerState& state) {
  const double lr = poly_lr(state.iter, state.iter_max, state.base_lr);
  for (Parameter* p : params.trainable()) {
    if (p->grad.shape() != p->value.shape() || p->grad.dtype() != p->value.dtype()) {
      throw ShapeError("sgd_step: gradient of " + p->name + " is " + to_string(p->grad.shape()) +
                       ", parameter is " + to_string(p->value.shape()));
    }
    auto [it, inserted] = state.velocity.try_emplace(p->name);
    if (inserted) it->second = Tensor::zeros(p->value.shape(), p->value.dtype());
    Tensor& v = it->second;
    if (v.shape() != p->value.shape() || v.dtype() != p->value.dtype()) {
      throw ShapeError("sgd_step: velocity of " + p->name + " is " + to_string(v.shape()) +
                       ", parameter is " + to_string(p->value.shape()));
    }
    dispatch(p->value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto w = p->value.data<T>();
      auto g = std::as_const(p->grad).data<T>();
      auto vel = v.data<T>();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double vi = state.momentum * static_cast<double>(vel[i]) + static_cast<double>(g[i]) +
                          state.weight_decay * static_cast<double>(w[i]);
        vel[i] = static_cast<T>(vi);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * vi);
      }
    });
  }
  ++state.iter;
  return lr;
}

// ---- metrics ----

MetricAccumulator::MetricAccumulator(int num_classes, int ignore_index)
    : classes_(num_classes),
      ignore_(ignore_index),
      confusion_(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes), 0) {
  if (num_classes < 1) throw std::invalid_argument("MetricAccumulator: num_classes must be positive");
}

void MetricAccumulator::add(const LabelMap& prediction, const LabelMap& truth) {
  if (prediction.height != truth.height || prediction.width != truth.width) {
    throw ShapeError("MetricAccumulator: prediction and truth sizes differ");
  }
  const auto k = static_cast<std::size_t>(classes_);
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    const int t = truth.values[i];
    if (t == ignore_) continue;
    const int p = prediction.values[i];
    if (t >= classes_ || p >= classes_) {
      throw std::out_of_range("MetricAccumulator: label " + std::to_string(std::max(t, p)) +
                              " outside [0," + std::to_string(classes_) + ")");
    }
    ++confusion_[static_cast<std::size_t>(t) * k + static_cast<std::size_t>(p)];
    ++total_;
  }
}

std::uint64_t MetricAccumulator::count(int truth, int prediction) const {
  return confusion_.at(static_cast<std::size_t>(truth) * static_cast<std::size_t>(classes_) +
                       static_cast<std::size_t>(prediction));
}

std::vector<std::optional<double>> MetricAccumulator::class_iou() const {
  std::vector<std::optional<double>> iou(static_cast<std::size_t>(classes_));
  for (int c = 0; c < classes_; ++c) {
    const std::uint64_t tp = count(c, c);
    std::uint64_t fp = 0, fn = 0;
    for (int o = 0; o < classes_; ++o) {
      if (o == c) continue;
      fp += count(o, c);
      fn += count(c, o);
    }
    const std::uint64_t den = tp + fp + fn;
    if (den > 0) iou[static_cast<std::size_t>(c)] = static_cast<double>(tp) / static_cast<double>(den);
  }
  return iou;
}

double MetricAccumulator::mean_iou() const {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : class_iou()) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

double MetricAccumulator::pixel_accuracy() const {
  if (total_ == 0) return 0.0;
  std::uint64_t correct = 0;
  for (int c = 0; c < classes_; ++c) correct += count(c, c);
  return static_cast<double>(correct) / static_cast<double>(total_);
}

// ---- augmentation ----

std::size_t scaled_size(std::size_t size, double scale) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(size) * scale)));
}

AugmentGeometry draw_augmentation(std::size_t height, std::size_t width, const AugmentOptions& opts,
                                  Rng& rng) {
  if (opts.crop == 0 || opts.crop % 8 != 0) {
    throw std::invalid_argument("augment: crop " + std::to_string(opts.crop) + " is not divisible by 8");
  }
  AugmentGeometry g;
  g.scale = rng.uniform(opts.min_scale, opts.max_scale);
  g.flip = rng.bernoulli(opts.flip_probability);
  const std::size_t sh = std::max(scaled_size(height, g.scale), opts.crop);
  const std::size_t sw = std::max(scaled_size(width, g.scale), opts.crop);
  g.offset_y = rng.integer(0, sh - opts.crop);
  g.offset_x = rng.integer(0, sw - opts.crop);
  return g;
}

SceneSample apply_augmentation(const SceneSample& sample, const AugmentGeometry& geometry,
                               std::size_t crop, int ignore_index) {
  const std::size_t h = sample.labels.height, w = sample.labels.width;
  const std::size_t sh = scaled_size(h, geometry.scale), sw = scaled_size(w, geometry.scale);
  const bool resize = sh != h || sw != w;
  const Tensor image = resize ? kernels::bilinear_resize(sample.image, sh, sw) : sample.image;
  const LabelMap labels = resize ? kernels::resize_nearest(sample.labels, sh, sw) : sample.labels;
  const std::size_t channels = image.dim(0);
  if (geometry.offset_y + crop > std::max(sh, crop) || geometry.offset_x + crop > std::max(sw, crop)) {
    throw std::invalid_argument("augment: crop window falls outside the rescaled image");
  }

  SceneSample out;
  out.image = Tensor::zeros({channels, crop, crop}, image.dtype());
  out.labels = LabelMap(crop, crop, static_cast<std::uint8_t>(ignore_index));
  for (std::size_t y = 0; y < crop; ++y) {
    const std::size_t sy = geometry.offset_y + y;
    if (sy >= sh) continue;
    for (std::size_t x = 0; x < crop; ++x) {
      const std::size_t sx = geometry.offset_x + x;
      if (sx >= sw) continue;
      const std::size_t dx = geometry.flip ? crop - 1 - x : x;
      out.labels.at(y, dx) = labels.at(sy, sx);
      for (std::size_t c = 0; c < channels; ++c) {
        out.image.set((c * crop + y) * crop + dx, image.at((c * sh + sy) * sw + sx));
      }
    }
  }
  return out;
}

SceneSample augment(const SceneSample& sample, Rng& rng, const AugmentOptions& opts, int ignore_index) {
  const auto g = draw_augmentation(sample.labels.height, sample.labels.width, opts, rng);
  return apply_augmentation(sample, g, opts.crop, ignore_index);
}

// ---- training loop ----

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (iterations <= 0) throw std::invalid_argument("iterations must be positive");
  if (!(base_lr > 0.0)) throw std::invalid_argument("base learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0,1)");
  if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be non-negative");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint interval must be non-negative");
  if (augmentation.crop == 0 || augmentation.crop % 8 != 0) {
    throw std::invalid_argument("crop " + std::to_string(augmentation.crop) + " is not divisible by 8");
  }
  if (!(augmentation.min_scale > 0.0) || augmentation.max_scale < augmentation.min_scale) {
    throw std::invalid_argument("augmentation scale range is invalid");
  }
}

std::string format_log_line(const TrainLogEntry& e) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%lld\t%.17g\t%.17g", static_cast<long long>(e.iter), e.lr, e.loss);
  return buf;
}

OptimizerState make_optimizer(const TrainConfig& config) {
  OptimizerState s;
  s.momentum = config.momentum;
  s.weight_decay = config.weight_decay;
  s.base_lr = config.base_lr;
  s.iter = 0;
  s.iter_max = config.iterations;
  return s;
}

namespace {

std::string parameter_diagnostics(const ParameterSet& params) {
  std::ostringstream os;
  const Parameter* worst = nullptr;
  double worst_abs = -1.0;
  for (const Parameter* p : params.all()) {
    if (!p->value.all_finite()) {
      os << " non-finite parameter " << p->name << ";";
      continue;
    }
    const double m = p->value.max_abs();
    if (m > worst_abs) {
      worst_abs = m;
      worst = p;
    }
  }
  if (worst) os << " largest |parameter| = " << worst_abs << " in " << worst->name;
  return os.str();
}

Tensor stack_images(const std::vector<SceneSample>& batch, DType dtype) {
  const Shape& s = batch.front().image.shape();
  Tensor out({batch.size(), s[0], s[1], s[2]}, dtype);
  const std::size_t n = batch.front().image.numel();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].image.shape() != s) {
      throw ShapeError("train: batch images differ in size; enable augmentation or use a uniform corpus");
    }
    for (std::size_t i = 0; i < n; ++i) out.set(b * n + i, batch[b].image.at(i));
  }
  return out;
}

}  // namespace

TrainResult train(SegModel& model, std::span<const SceneSample> data, const TrainConfig& config,
                  OptimizerState& state, const TrainHooks& hooks) {
  config.validate();
  if (data.empty()) throw TrainingError("train: empty dataset");
  if (state.iter_max != config.iterations) {
    throw TrainingError("train: optimizer state was built for " + std::to_string(state.iter_max) +
                        " iterations, config requests " + std::to_string(config.iterations));
  }
  TrainResult result;
  const DType dtype = model.config().dtype;
  while (state.iter < config.iterations) {
    const std::int64_t iter = state.iter;
    Rng rng(config.seed, static_cast<std::uint64_t>(iter));
    std::vector<SceneSample> batch;
    batch.reserve(config.batch_size);
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const SceneSample& s = data[rng.integer(0, data.size() - 1)];
      batch.push_back(config.augment ? augment(s, rng, config.augmentation, model.config().ignore_index) : s);
    }
    std::vector<LabelMap> labels;
    labels.reserve(batch.size());
    for (auto& s : batch) labels.push_back(s.labels);

    const double lr = poly_lr(iter, state.iter_max, state.base_lr);
    double loss_value = 0.0;
    try {
      Graph g;
      auto out = model.forward(g, stack_images(batch, dtype), ops::NormMode::Train);
      Var loss = model.loss(out, labels);
      loss_value = loss.value().at(0);
      if (!std::isfinite(loss_value)) throw NumericError("loss is " + std::to_string(loss_value));
      g.backward(loss);
      for (const Parameter* p : model.parameters().all()) {
        if (p->trainable && !p->grad.all_finite()) throw NumericError("non-finite gradient for " + p->name);
      }
      if (config.check_invariants) {
        for (const auto& level : out.levels) {
          const auto r = check_level_invariants(level, out.features.value());
          auto& inv = result.invariants;
          inv.worst_row_sum_error = std::max(inv.worst_row_sum_error, r.max_row_sum_error);
          inv.worst_range_violation = std::max(inv.worst_range_violation, r.max_range_violation);
          inv.worst_conservation_relative =
              std::max(inv.worst_conservation_relative, r.max_conservation_relative);
          inv.worst_conservation_absolute =
              std::max(inv.worst_conservation_absolute, r.max_conservation_error);
          ++inv.checks;
          if (r.max_row_sum_error > config.row_sum_tolerance || r.max_range_violation > 0.0 ||
              r.max_conservation_relative > config.conservation_tolerance) {
            std::ostringstream os;
            os << "train: region invariants violated at iter " << iter << " level " << level.regions.level
               << ": row-sum error " << r.max_row_sum_error << ", range violation "
               << r.max_range_violation << ", conservation error " << r.max_conservation_relative;
            throw TrainingError(os.str());
          }
        }
      }
    } catch (const NumericError& e) {
      std::ostringstream os;
      os << "training diverged at iter " << iter << " (lr " << lr << "): " << e.what() << ";"
         << parameter_diagnostics(model.parameters());
      throw TrainingError(os.str());
    }
    sgd_step(model.parameters(), state);

    const TrainLogEntry entry{iter, lr, loss_value};
    result.log.push_back(entry);
    if (hooks.on_iteration) hooks.on_iteration(entry);
    if (hooks.on_checkpoint && config.checkpoint_every > 0 && state.iter % config.checkpoint_every == 0) {
      hooks.on_checkpoint(state.iter, state);
    }
  }
  return result;
}

// ---- evaluation ----

EvalResult evaluate(SegModel& model, std::span<const SceneSample> data, const EvalOptions& opts) {
  MetricAccumulator acc(model.config().num_classes, model.config().ignore_index);
  const DType dtype = model.config().dtype;
  for (const auto& s : data) {
    const Tensor image = s.image.dtype() == dtype ? s.image : s.image.astype(dtype);
    const LabelMap pred = opts.tta ? tta_predict(model, image, opts.scales, opts.flip)
                                   : predict_any_size(model, image);
    acc.add(pred, s.labels);
  }
  EvalResult r;
  r.class_iou = acc.class_iou();
  r.mean_iou = acc.mean_iou();
  r.pixel_accuracy = acc.pixel_accuracy();
  r.pixels = acc.total();
  return r;
}

}  // namespace hdca
