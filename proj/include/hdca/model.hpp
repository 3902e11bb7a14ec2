#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "hdca/backbone.hpp"
#include "hdca/hdca.hpp"

namespace hdca {

struct ModelConfig {
  BackboneConfig backbone;
  HdcaConfig hdca;
  int num_classes = 6;
  int ignore_index = kIgnoreIndex;
  DType dtype = DType::Float32;
  std::uint64_t init_seed = 0;

  void validate() const;
};

/// Backbone, optional HDCA stack and a 1x1 classifier. An empty region schedule
/// gives the no-hierarchy baseline whose classifier reads X' directly.
class SegModel {
 public:
  explicit SegModel(const ModelConfig& config);

  struct Output {
    Var logits;        // [B,K,H,W]
    Var features;      // X  [B,C,H/8,W/8]
    Var reduced;       // X' [B,C',H/8,W/8]
    Var coarse_logits; // [B,K,H/8,W/8]
    std::vector<LevelOutput> levels;
  };

  /// images: [B,3,H,W] with H and W divisible by 8.
  Output forward(Graph& g, const Tensor& images, ops::NormMode mode);
  Var loss(const Output& out, std::span<const LabelMap> labels) const;

  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  const ModelConfig& config() const { return config_; }
  bool has_hierarchy() const { return stack_ != nullptr; }
  const HdcaStack* stack() const { return stack_.get(); }
  std::size_t classifier_in_channels() const;

 private:
  ModelConfig config_;
  ParameterSet params_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<HdcaStack> stack_;
  Parameter* classifier_weight_ = nullptr;
  Parameter* classifier_bias_ = nullptr;
};

/// Class-probability maps [B,K,H,W] in eval mode.
Tensor predict_probabilities(SegModel& model, const Tensor& images);
/// Argmax of the eval-mode logits, ties to the lowest class index.
std::vector<LabelMap> predict_labels(SegModel& model, const Tensor& images);

/// Averaged class probabilities [K,H,W] over rescaled (and optionally mirrored)
/// copies of one [3,H,W] image. Scaled sizes are rounded to the nearest multiple of 8.
Tensor tta_probabilities(SegModel& model, const Tensor& image, std::span<const double> scales,
                         bool flip);
LabelMap tta_predict(SegModel& model, const Tensor& image, std::span<const double> scales,
                     bool flip);

/// Nearest multiple of 8, at least 8.
std::size_t round_to_multiple_of_8(double size);

/// Prediction for an image of any size: reflect-pads to a multiple of 8 and
/// crops the prediction back.
LabelMap predict_any_size(SegModel& model, const Tensor& image);
/// Reflect padding of a [C,H,W] tensor at the bottom and right edges.
Tensor reflect_pad(const Tensor& image, std::size_t height, std::size_t width);

}  // namespace hdca
