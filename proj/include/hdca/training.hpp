#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdca/model.hpp"
#include "hdca/random.hpp"
#include "hdca/synthdata.hpp"

namespace hdca {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- learning rate and optimizer ----

/// base_lr * (1 - iter/iter_max)^power for 0 <= iter <= iter_max.
double poly_lr(std::int64_t iter, std::int64_t iter_max, double base_lr, double power = 0.9);

struct OptimizerState {
  std::map<std::string, Tensor> velocity;  // keyed by parameter name
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double base_lr = 0.01;
  std::int64_t iter = 0;
  std::int64_t iter_max = 2000;
};

/// One SGD step with momentum and coupled weight decay at lr = poly_lr(iter):
///   v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v.
/// Advances state.iter and returns the learning rate used.
double sgd_step(ParameterSet& params, OptimizerState& state);

// ---- metrics ----

class MetricAccumulator {
 public:
  explicit MetricAccumulator(int num_classes, int ignore_index = kIgnoreIndex);

  void add(const LabelMap& prediction, const LabelMap& truth);

  /// Confusion count for (truth, prediction).
  std::uint64_t count(int truth, int prediction) const;
  std::uint64_t total() const { return total_; }
  int num_classes() const { return classes_; }

  /// Per-class IoU; empty for classes absent from both truth and prediction.
  std::vector<std::optional<double>> class_iou() const;
  double mean_iou() const;
  double pixel_accuracy() const;

 private:
  int classes_;
  int ignore_;
  std::vector<std::uint64_t> confusion_;
  std::uint64_t total_ = 0;
};

// ---- augmentation ----

struct AugmentOptions {
  double min_scale = 0.5;
  double max_scale = 2.0;
  double flip_probability = 0.5;
  std::size_t crop = 64;
};

struct AugmentGeometry {
  double scale = 1.0;
  bool flip = false;
  std::size_t offset_y = 0;  // crop origin in the (padded) rescaled frame
  std::size_t offset_x = 0;
};

/// Rescaled size of one image side, at least 1.
std::size_t scaled_size(std::size_t size, double scale);

AugmentGeometry draw_augmentation(std::size_t height, std::size_t width, const AugmentOptions& opts,
                                  Rng& rng);
/// Rescale (bilinear image, nearest labels), pad bottom/right with zeros and
/// ignore_index up to the crop, crop, then mirror if requested.
SceneSample apply_augmentation(const SceneSample& sample, const AugmentGeometry& geometry,
                               std::size_t crop, int ignore_index = kIgnoreIndex);
SceneSample augment(const SceneSample& sample, Rng& rng, const AugmentOptions& opts,
                    int ignore_index = kIgnoreIndex);

// ---- training loop ----

struct TrainConfig {
  std::size_t batch_size = 4;
  std::int64_t iterations = 2000;
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentOptions augmentation;
  std::int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  bool check_invariants = false;
  double row_sum_tolerance = 1e-6;
  double conservation_tolerance = 1e-4;  // relative to max(1, sum |X|) per channel

  void validate() const;
};

struct TrainLogEntry {
  std::int64_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;
};

/// "iter\tlr\tloss" with round-trip precision.
std::string format_log_line(const TrainLogEntry& e);

struct TrainHooks {
  std::function<void(const TrainLogEntry&)> on_iteration;
  /// Called after the step that completes iteration `iter` (1-based count) when
  /// it is a multiple of checkpoint_every.
  std::function<void(std::int64_t completed, const OptimizerState&)> on_checkpoint;
};

struct InvariantStats {
  double worst_row_sum_error = 0.0;
  double worst_range_violation = 0.0;
  double worst_conservation_relative = 0.0;
  double worst_conservation_absolute = 0.0;
  std::int64_t checks = 0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  InvariantStats invariants;
};

/// Fresh optimizer state for `config`.
OptimizerState make_optimizer(const TrainConfig& config);

/// Runs iterations state.iter .. config.iterations-1. Each iteration draws its
/// batch and augmentation from Rng(seed, iter), so resuming from a saved state
/// continues the same sequence.
TrainResult train(SegModel& model, std::span<const SceneSample> data, const TrainConfig& config,
                  OptimizerState& state, const TrainHooks& hooks = {});

// ---- evaluation ----

struct EvalOptions {
  bool tta = false;
  std::vector<double> scales{0.75, 1.0, 1.25};
  bool flip = true;
};

struct EvalResult {
  std::vector<std::optional<double>> class_iou;
  double mean_iou = 0.0;
  double pixel_accuracy = 0.0;
  std::uint64_t pixels = 0;
};

EvalResult evaluate(SegModel& model, std::span<const SceneSample> data, const EvalOptions& opts = {});

}  // namespace hdca
