#include "hdca/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace hdca {

void ModelConfig::validate() const {
  backbone.validate();
  hdca.validate();
  if (num_classes < 1 || num_classes > 255) {
    throw std::invalid_argument("num_classes must be in [1,255], got " + std::to_string(num_classes));
  }
  if (ignore_index >= 0 && ignore_index < num_classes) {
    throw std::invalid_argument("ignore_index collides with a class index");
  }
}

SegModel::SegModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.init_seed);
  backbone_ = std::make_unique<Backbone>(params_, config_.backbone, config_.dtype, rng);
  const auto features = static_cast<std::size_t>(config_.backbone.out_channels);
  const auto reduced = static_cast<std::size_t>(config_.backbone.reduced_channels);
  if (!config_.hdca.region_schedule.empty()) {
    stack_ = std::make_unique<HdcaStack>(params_, config_.hdca, features, reduced, config_.dtype, rng);
  }
  const auto classes = static_cast<std::size_t>(config_.num_classes);
  classifier_weight_ = &params_.add(
      "classifier.weight", kaiming_conv_weight(classes, classifier_in_channels(), 1, config_.dtype, rng));
  classifier_bias_ = &params_.add("classifier.bias", Tensor::zeros({classes}, config_.dtype));
}

std::size_t SegModel::classifier_in_channels() const {
  const auto reduced = static_cast<std::size_t>(config_.backbone.reduced_channels);
  if (!stack_) return reduced;
  return stack_->pyramid_channels() + (config_.hdca.include_reduced_features ? reduced : 0);
}

SegModel::Output SegModel::forward(Graph& g, const Tensor& images, ops::NormMode mode) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("model_forward: expected images [B,3,H,W], got " + to_string(images.shape()));
  }
  const std::size_t h = images.dim(2), w = images.dim(3);
  if (h % 8 != 0 || w % 8 != 0) {
    throw ShapeError("model_forward: input size " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by 8");
  }
  if (images.dtype() != config_.dtype) {
    throw ShapeError("model_forward: image dtype " + to_string(images.dtype()) +
                     " differs from model dtype " + to_string(config_.dtype));
  }
  Output out;
  Var x = g.constant(images);
  out.features = backbone_->forward(g, x, mode);
  out.reduced = backbone_->reduce(g, out.features, mode);
  Var head_input = out.reduced;
  if (stack_) {
    StackOutput st = stack_->forward(g, out.features, out.reduced, mode);
    out.levels = std::move(st.levels);
    head_input = st.pyramid;
    if (config_.hdca.include_reduced_features) {
      const Var parts[] = {out.reduced, st.pyramid};
      head_input = ops::concat_channels(parts);
    }
  }
  out.coarse_logits = ops::conv2d(head_input, g.parameter(*classifier_weight_),
                                  g.parameter(*classifier_bias_));
  out.logits = ops::bilinear_resize(out.coarse_logits, h, w);
  return out;
}

Var SegModel::loss(const Output& out, std::span<const LabelMap> labels) const {
  return ops::cross_entropy(out.logits, labels, config_.ignore_index);
}

namespace {

Tensor eval_logits(SegModel& model, const Tensor& images) {
  Graph g;
  g.set_grad_enabled(false);
  return model.forward(g, images, ops::NormMode::Eval).logits.value();
}

Tensor as_batch(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("expected a [3,H,W] image, got " + to_string(image.shape()));
  return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
}

}  // namespace

Tensor predict_probabilities(SegModel& model, const Tensor& images) {
  return kernels::softmax_channels(eval_logits(model, images));
}

std::vector<LabelMap> predict_labels(SegModel& model, const Tensor& images) {
  return kernels::argmax_channels(eval_logits(model, images));
}

std::size_t round_to_multiple_of_8(double size) {
  const double m = std::round(size / 8.0);
  return m < 1.0 ? 8 : static_cast<std::size_t>(m) * 8;
}

Tensor tta_probabilities(SegModel& model, const Tensor& image, std::span<const double> scales,
                         bool flip) {
  if (scales.empty()) throw std::invalid_argument("tta_predict: scales must be nonempty");
  const std::size_t h = image.dim(1), w = image.dim(2);
  const auto classes = static_cast<std::size_t>(model.config().num_classes);
  Tensor total = Tensor::zeros({classes, h, w}, image.dtype());
  std::size_t count = 0;
  for (double s : scales) {
    if (!(s > 0.0)) throw std::invalid_argument("tta_predict: scales must be positive");
    const std::size_t sh = round_to_multiple_of_8(static_cast<double>(h) * s);
    const std::size_t sw = round_to_multiple_of_8(static_cast<double>(w) * s);
    const Tensor scaled = kernels::bilinear_resize(image, sh, sw);
    for (int mirrored = 0; mirrored <= (flip ? 1 : 0); ++mirrored) {
      Tensor input = mirrored ? kernels::flip_horizontal(scaled) : scaled;
      Tensor probs = predict_probabilities(model, as_batch(input));
      probs = probs.reshaped({classes, sh, sw});
      if (mirrored) probs = kernels::flip_horizontal(probs);
      total.add_inplace(kernels::bilinear_resize(probs, h, w));
      ++count;
    }
  }
  total.scale_inplace(1.0 / static_cast<double>(count));
  return total;
}

LabelMap tta_predict(SegModel& model, const Tensor& image, std::span<const double> scales,
                     bool flip) {
  return kernels::argmax_channels(tta_probabilities(model, image, scales, flip)).front();
}

namespace {

std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace

Tensor reflect_pad(const Tensor& image, std::size_t height, std::size_t width) {
  const auto d = kernels::feature_dims(image.shape(), "reflect_pad");
  if (image.rank() != 3 || height < d.height || width < d.width) {
    throw ShapeError("reflect_pad: cannot pad " + to_string(image.shape()) + " to " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  Tensor out({d.channels, height, width}, image.dtype());
  for (std::size_t c = 0; c < d.channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      const std::size_t sy = reflect_index(y, d.height);
      for (std::size_t x = 0; x < width; ++x) {
        const std::size_t sx = reflect_index(x, d.width);
        out.set((c * height + y) * width + x, image.at((c * d.height + sy) * d.width + sx));
      }
    }
  }
  return out;
}

LabelMap predict_any_size(SegModel& model, const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("expected a [3,H,W] image, got " + to_string(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::size_t ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  const Tensor padded = (ph == h && pw == w) ? image : reflect_pad(image, ph, pw);
  LabelMap full = predict_labels(model, as_batch(padded)).front();
  if (ph == h && pw == w) return full;
  LabelMap out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out.at(y, x) = full.at(y, x);
  }
  return out;
}

}  // namespace hdca
