#pragma once

#include <random>
#include <vector>

#include "hdca/layers.hpp"

namespace hdca {

struct BackboneConfig {
  int stem_channels = 16;
  std::vector<int> stage_channels{16, 32, 64};
  std::vector<int> stage_dilations{1, 2, 4};
  int out_channels = 64;      // C
  int reduced_channels = 32;  // C'

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

/// Plain dilated CNN with output stride 8.
///
/// Two stride-2 stem blocks, then one two-block stage per entry of
/// stage_channels. The first stage opens with the third stride-2 block; later
/// stages keep the resolution and widen the receptive field through dilation.
/// A 1x1 block maps to C channels and a second 1x1 block produces the reduced
/// companion map with C' channels.
class Backbone {
 public:
  Backbone(ParameterSet& params, const BackboneConfig& config, DType dtype, std::mt19937_64& rng);

  /// [B,3,H,W] -> [B,C,ceil(H/8),ceil(W/8)].
  Var forward(Graph& g, Var image, ops::NormMode mode) const;
  /// [B,C,h,w] -> [B,C',h,w].
  Var reduce(Graph& g, Var features, ops::NormMode mode) const;

  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  std::vector<ConvBnRelu> blocks_;
  ConvBnRelu head_;
  ConvBnRelu reduce_;
};

}  // namespace hdca
