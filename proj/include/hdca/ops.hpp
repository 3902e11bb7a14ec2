#pragma once

// Differentiable kernels. Feature maps are channel-first: [C,H,W] for a single
// image or [B,C,H,W] for a batch. Every op records itself on the graph that
// owns its inputs.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "hdca/graph.hpp"
#include "hdca/label_map.hpp"

namespace hdca::ops {

/// a[m,k] * b[k,n], or the batched form a[B,m,k] * b[B,k,n]. The transpose
/// flags apply to the trailing two axes.
Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

/// Dilated cross-correlation. weight is [C_out,C_in,kh,kw] with kh,kw in {1,3}.
Var conv2d(Var x, Var weight, std::optional<Var> bias, Conv2dOptions options = {});

/// Softmax across the channel axis at every spatial position.
Var softmax_channels(Var x);

/// Bilinear resampling with half-pixel centers (align_corners = false).
Var bilinear_resize(Var x, std::size_t height, std::size_t width);

Var concat_channels(std::span<const Var> xs);
Var slice_channels(Var x, std::size_t begin, std::size_t count);

enum class NormMode { Train, Eval };

struct BatchNormOptions {
  NormMode mode = NormMode::Train;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Per-channel normalization over batch and spatial axes. In Train mode the
/// running statistics are updated in place.
Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
               BatchNormOptions options = {});

Var relu(Var x);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
/// Sums over the listed axes (all axes when empty); reduced axes are dropped.
Var reduce_sum(Var x, std::vector<std::size_t> axes = {});
/// v[..., r, c] / max(d[..., r], min_denominator).
Var divide_rows(Var v, Var d, double min_denominator);
Var reshape(Var x, Shape shape);
/// x[..., in] * weight[out,in]^T + bias[out].
Var linear(Var x, Var weight, std::optional<Var> bias);

/// Mean over non-ignored pixels of -log softmax(logits)[label]. One label map
/// per batch item.
Var cross_entropy(Var logits, std::span<const LabelMap> labels, int ignore_index);

}  // namespace hdca::ops

namespace hdca::kernels {

// Forward-only helpers on plain tensors.

Tensor bilinear_resize(const Tensor& x, std::size_t height, std::size_t width);
Tensor softmax_channels(const Tensor& x);
Tensor flip_horizontal(const Tensor& x);
/// Per-pixel argmax over channels, ties to the lowest index. One map per batch item.
std::vector<LabelMap> argmax_channels(const Tensor& x);
LabelMap resize_nearest(const LabelMap& labels, std::size_t height, std::size_t width);

/// Splits a feature map into (batch, channels, height, width); rank 3 means batch 1.
struct FeatureDims {
  std::size_t batch, channels, height, width;
};
FeatureDims feature_dims(const Shape& shape, const char* op);

}  // namespace hdca::kernels
