#include "hdca/hdca.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace hdca {

void HdcaConfig::validate() const {
  for (std::size_t i = 0; i < region_schedule.size(); ++i) {
    if (region_schedule[i] < 2) {
      throw std::invalid_argument("region schedule entries must be at least 2, got " +
                                  std::to_string(region_schedule[i]));
    }
    if (i > 0 && region_schedule[i] <= region_schedule[i - 1]) {
      throw std::invalid_argument("region schedule must be strictly increasing");
    }
  }
  if (region_schedule.size() > 0 && region_schedule.back() > 256) {
    throw std::invalid_argument("region schedule entries above 256 are not supported");
  }
  if (context_channels <= 0) throw std::invalid_argument("context_channels must be positive");
  if (hidden_channels < 0) throw std::invalid_argument("hidden_channels must be >= 0");
  if (!(region_epsilon > 0.0)) throw std::invalid_argument("region_epsilon must be positive");
}

std::size_t RegionProbabilityMap::regions() const {
  return kernels::feature_dims(values.shape(), "RegionProbabilityMap").channels;
}

HdcaLevelParams HdcaLevelParams::create(ParameterSet& params, int level, int regions,
                                        std::size_t infer_in, std::size_t hidden,
                                        std::size_t features, std::size_t context, DType dtype,
                                        std::mt19937_64& rng) {
  const std::string prefix = "hdca.level" + std::to_string(level);
  const auto s = static_cast<std::size_t>(regions);
  HdcaLevelParams p;
  p.level = level;
  p.regions = regions;
  p.infer = ConvBnRelu::create(params, prefix + ".infer", infer_in, hidden, 3, {1, 1, 1}, dtype, rng);
  p.region_weight = &params.add(prefix + ".regions.weight", kaiming_conv_weight(s, hidden, 1, dtype, rng));
  p.region_bias = &params.add(prefix + ".regions.bias", Tensor::zeros({s}, dtype));
  p.reduce_weight = &params.add(prefix + ".reduce.weight",
                                kaiming_conv_weight(context, features, 1, dtype, rng).reshaped({context, features}));
  p.reduce_bias = &params.add(prefix + ".reduce.bias", Tensor::zeros({context}, dtype));
  return p;
}

RegionProbabilityMap infer_regions(Graph& g, Var x_reduced, std::optional<Var> prev_context,
                                   const HdcaLevelParams& params, ops::NormMode mode) {
  if (params.level == 1 && prev_context) {
    throw std::invalid_argument("infer_regions: level 1 takes no previous context");
  }
  if (params.level > 1 && !prev_context) {
    throw std::invalid_argument("infer_regions: level " + std::to_string(params.level) +
                                " requires the previous level's context");
  }
  Var input = x_reduced;
  if (prev_context) {
    const auto a = kernels::feature_dims(x_reduced.shape(), "infer_regions");
    const auto b = kernels::feature_dims(prev_context->shape(), "infer_regions");
    if (a.batch != b.batch || a.height != b.height || a.width != b.width) {
      throw ShapeError("infer_regions: spatial mismatch " + to_string(x_reduced.shape()) + " vs " +
                       to_string(prev_context->shape()));
    }
    const Var parts[] = {x_reduced, *prev_context};
    input = ops::concat_channels(parts);
  }
  Var hidden = params.infer.forward(g, input, mode);
  Var logits = ops::conv2d(hidden, g.parameter(*params.region_weight),
                           g.parameter(*params.region_bias));
  return {ops::softmax_channels(logits), params.level};
}

namespace {

// [B,K,h,w] -> [B,K,h*w]; [K,h,w] -> [K,h*w].
Var flatten_spatial(Var v, const char* op) {
  const Shape& s = v.shape();
  const auto d = kernels::feature_dims(s, op);
  if (s.size() == 3) return ops::reshape(v, {d.channels, d.height * d.width});
  return ops::reshape(v, {d.batch, d.channels, d.height * d.width});
}

}  // namespace

Var aggregate_contexts(Var p, Var x) {
  const auto pd = kernels::feature_dims(p.shape(), "aggregate_contexts");
  const auto xd = kernels::feature_dims(x.shape(), "aggregate_contexts");
  if (p.value().rank() != x.value().rank() || pd.batch != xd.batch || pd.height != xd.height ||
      pd.width != xd.width) {
    throw ShapeError("aggregate_contexts: spatial mismatch " + to_string(p.shape()) + " vs " +
                     to_string(x.shape()));
  }
  return ops::matmul(flatten_spatial(p, "aggregate_contexts"),
                     flatten_spatial(x, "aggregate_contexts"), false, true);
}

NormalizedContexts normalize_contexts(Var v, Var p, double epsilon) {
  Var flat = flatten_spatial(p, "normalize_contexts");
  Var mass = ops::reduce_sum(flat, {flat.value().rank() - 1});
  return {ops::divide_rows(v, mass, epsilon), mass};
}

Var reduce_contexts(Graph& g, Var normalized, const HdcaLevelParams& params) {
  return ops::linear(normalized, g.parameter(*params.reduce_weight),
                     g.parameter(*params.reduce_bias));
}

Var reproject(Var p, Var contexts) {
  const auto d = kernels::feature_dims(p.shape(), "reproject");
  Var flat = ops::matmul(contexts, flatten_spatial(p, "reproject"), true, false);
  const std::size_t channels = contexts.shape().back();
  if (p.value().rank() == 3) return ops::reshape(flat, {channels, d.height, d.width});
  return ops::reshape(flat, {d.batch, channels, d.height, d.width});
}

LevelOutput contextualize(Graph& g, Var x, RegionProbabilityMap regions, const HdcaLevelParams& params,
                          double epsilon) {
  LevelOutput out;
  out.regions = regions;
  const Var p = out.regions.values;
  out.contexts.raw = aggregate_contexts(p, x);
  auto normalized = normalize_contexts(out.contexts.raw, p, epsilon);
  out.contexts.normalized = normalized.normalized;
  out.contexts.region_mass = normalized.region_mass;
  out.contexts.reduced = reduce_contexts(g, out.contexts.normalized, params);
  out.output = reproject(p, out.contexts.reduced);
  return out;
}

LevelOutput forward_level(Graph& g, Var x, Var x_reduced, std::optional<Var> prev,
                          const HdcaLevelParams& params, ops::NormMode mode, double epsilon) {
  return contextualize(g, x, infer_regions(g, x_reduced, prev, params, mode), params, epsilon);
}

HdcaStack::HdcaStack(ParameterSet& params, const HdcaConfig& config, std::size_t features,
                     std::size_t reduced, DType dtype, std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  if (config_.region_schedule.empty()) {
    throw std::invalid_argument("HdcaStack needs a nonempty region schedule");
  }
  const std::size_t hidden =
      config_.hidden_channels > 0 ? static_cast<std::size_t>(config_.hidden_channels) : reduced;
  const auto context = static_cast<std::size_t>(config_.context_channels);
  for (std::size_t n = 0; n < config_.region_schedule.size(); ++n) {
    const std::size_t infer_in = n == 0 ? reduced : reduced + context;
    levels_.push_back(HdcaLevelParams::create(params, static_cast<int>(n + 1),
                                              config_.region_schedule[n], infer_in, hidden,
                                              features, context, dtype, rng));
  }
}

StackOutput HdcaStack::forward(Graph& g, Var x, Var x_reduced, ops::NormMode mode) const {
  StackOutput out;
  std::optional<Var> prev;
  std::vector<Var> parts;
  for (const auto& level : levels_) {
    out.levels.push_back(forward_level(g, x, x_reduced, prev, level, mode, config_.region_epsilon));
    prev = out.levels.back().output;
    parts.push_back(*prev);
  }
  out.pyramid = ops::concat_channels(parts);
  return out;
}

std::size_t HdcaStack::pyramid_channels() const {
  return levels_.size() * static_cast<std::size_t>(config_.context_channels);
}

std::vector<LabelMap> extract_region_maps(std::span<const Tensor> region_maps,
                                          std::size_t batch_index) {
  std::vector<LabelMap> out;
  out.reserve(region_maps.size());
  for (const Tensor& t : region_maps) {
    auto maps = kernels::argmax_channels(t);
    if (batch_index >= maps.size()) {
      throw std::out_of_range("extract_region_maps: batch index " + std::to_string(batch_index));
    }
    out.push_back(std::move(maps[batch_index]));
  }
  return out;
}

LevelInvariantReport check_level_invariants(const LevelOutput& level, const Tensor& x) {
  LevelInvariantReport r;
  const Tensor& p = level.regions.values.value();
  const auto pd = kernels::feature_dims(p.shape(), "check_level_invariants");
  const auto xd = kernels::feature_dims(x.shape(), "check_level_invariants");
  const std::size_t plane = pd.height * pd.width;
  for (std::size_t b = 0; b < pd.batch; ++b) {
    for (std::size_t j = 0; j < plane; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < pd.channels; ++k) {
        const double v = p.at((b * pd.channels + k) * plane + j);
        s += v;
        r.max_range_violation = std::max({r.max_range_violation, -v, v - 1.0});
      }
      r.max_row_sum_error = std::max(r.max_row_sum_error, std::abs(s - 1.0));
    }
  }
  const Tensor& v = level.contexts.raw.value();
  for (std::size_t b = 0; b < xd.batch; ++b) {
    for (std::size_t c = 0; c < xd.channels; ++c) {
      double spatial = 0.0, magnitude = 0.0;
      for (std::size_t j = 0; j < plane; ++j) {
        const double xv = x.at((b * xd.channels + c) * plane + j);
        spatial += xv;
        magnitude += std::abs(xv);
      }
      double pooled = 0.0;
      for (std::size_t i = 0; i < pd.channels; ++i) {
        pooled += v.at((b * pd.channels + i) * xd.channels + c);
      }
      const double err = std::abs(pooled - spatial);
      r.max_conservation_error = std::max(r.max_conservation_error, err);
      r.max_conservation_relative =
          std::max(r.max_conservation_relative, err / std::max(1.0, magnitude));
    }
  }
  return r;
}

}  // namespace hdca
