#include "hdca/backbone.hpp"

#include <stdexcept>
#include <string>

namespace hdca {

void BackboneConfig::validate() const {
  if (stem_channels <= 0 || out_channels <= 0 || reduced_channels <= 0) {
    throw std::invalid_argument("backbone channel counts must be positive");
  }
  if (stage_channels.empty() || stage_channels.size() != stage_dilations.size()) {
    throw std::invalid_argument("backbone stage_channels and stage_dilations must be nonempty and "
                                "of equal length");
  }
  for (std::size_t i = 0; i < stage_channels.size(); ++i) {
    if (stage_channels[i] <= 0 || stage_dilations[i] <= 0) {
      throw std::invalid_argument("backbone stage " + std::to_string(i) +
                                  " needs positive channels and dilation");
    }
  }
  if (reduced_channels >= out_channels) {
    throw std::invalid_argument("backbone reduced_channels (" + std::to_string(reduced_channels) +
                                ") must be smaller than out_channels (" +
                                std::to_string(out_channels) + ")");
  }
}

Backbone::Backbone(ParameterSet& params, const BackboneConfig& config, DType dtype,
                   std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  const auto sz = [](int v) { return static_cast<std::size_t>(v); };
  const ops::Conv2dOptions down{2, 1, 1};

  blocks_.push_back(ConvBnRelu::create(params, "backbone.stem1", 3, sz(config_.stem_channels), 3,
                                       down, dtype, rng));
  blocks_.push_back(ConvBnRelu::create(params, "backbone.stem2", sz(config_.stem_channels),
                                       sz(config_.stem_channels), 3, down, dtype, rng));
  std::size_t channels = sz(config_.stem_channels);
  for (std::size_t s = 0; s < config_.stage_channels.size(); ++s) {
    const std::size_t width = sz(config_.stage_channels[s]);
    const std::size_t dil = sz(config_.stage_dilations[s]);
    const std::string prefix = "backbone.stage" + std::to_string(s + 1);
    const ops::Conv2dOptions first{s == 0 ? 2u : 1u, dil, dil};
    const ops::Conv2dOptions second{1, dil, dil};
    blocks_.push_back(ConvBnRelu::create(params, prefix + ".block1", channels, width, 3, first,
                                         dtype, rng));
    blocks_.push_back(ConvBnRelu::create(params, prefix + ".block2", width, width, 3, second,
                                         dtype, rng));
    channels = width;
  }
  head_ = ConvBnRelu::create(params, "backbone.head", channels, sz(config_.out_channels), 1, {},
                             dtype, rng);
  reduce_ = ConvBnRelu::create(params, "backbone.reduce", sz(config_.out_channels),
                               sz(config_.reduced_channels), 1, {}, dtype, rng);
}

Var Backbone::forward(Graph& g, Var image, ops::NormMode mode) const {
  const auto d = kernels::feature_dims(image.shape(), "backbone_forward");
  if (d.channels != 3) {
    throw ShapeError("backbone_forward: expected a 3-channel image, got " + to_string(image.shape()));
  }
  Var x = image;
  for (const auto& block : blocks_) x = block.forward(g, x, mode);
  return head_.forward(g, x, mode);
}

Var Backbone::reduce(Graph& g, Var features, ops::NormMode mode) const {
  return reduce_.forward(g, features, mode);
}

}  // namespace hdca
