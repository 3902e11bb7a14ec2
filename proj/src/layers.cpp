#include "hdca/layers.hpp"

#include <cmath>

namespace hdca {

Tensor kaiming_conv_weight(std::size_t out, std::size_t in, std::size_t k, DType dtype,
                           std::mt19937_64& rng) {
  Tensor w({out, in, k, k}, dtype);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
  for (std::size_t i = 0; i < w.numel(); ++i) w.set(i, normal(rng));
  return w;
}

BatchNormParams BatchNormParams::create(ParameterSet& params, const std::string& prefix,
                                        std::size_t channels, DType dtype) {
  BatchNormParams bn;
  bn.gamma = &params.add(prefix + ".gamma", Tensor::ones({channels}, dtype));
  bn.beta = &params.add(prefix + ".beta", Tensor::zeros({channels}, dtype));
  bn.running_mean = &params.add(prefix + ".running_mean", Tensor::zeros({channels}, dtype), false);
  bn.running_var = &params.add(prefix + ".running_var", Tensor::ones({channels}, dtype), false);
  return bn;
}

Var BatchNormParams::forward(Graph& g, Var x, ops::NormMode mode) const {
  ops::BatchNormOptions opt;
  opt.mode = mode;
  return ops::batch_norm(x, g.parameter(*gamma), g.parameter(*beta), running_mean->value,
                         running_var->value, opt);
}

ConvBnRelu ConvBnRelu::create(ParameterSet& params, const std::string& prefix, std::size_t in,
                              std::size_t out, std::size_t kernel, ops::Conv2dOptions conv,
                              DType dtype, std::mt19937_64& rng) {
  ConvBnRelu block;
  block.weight = &params.add(prefix + ".conv.weight", kaiming_conv_weight(out, in, kernel, dtype, rng));
  block.bias = &params.add(prefix + ".conv.bias", Tensor::zeros({out}, dtype));
  block.norm = BatchNormParams::create(params, prefix + ".bn", out, dtype);
  block.conv = conv;
  return block;
}

Var ConvBnRelu::forward(Graph& g, Var x, ops::NormMode mode) const {
  Var y = ops::conv2d(x, g.parameter(*weight), g.parameter(*bias), conv);
  return ops::relu(norm.forward(g, y, mode));
}

}  // namespace hdca
