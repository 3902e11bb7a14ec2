#pragma once

#include <random>
#include <string>

#include "hdca/ops.hpp"
#include "hdca/parameters.hpp"

namespace hdca {

/// Kaiming (fan-in) normal initialization for a [out,in,k,k] convolution kernel.
Tensor kaiming_conv_weight(std::size_t out, std::size_t in, std::size_t k, DType dtype,
                           std::mt19937_64& rng);

/// Batch-norm parameters plus running statistics registered under `prefix`.
struct BatchNormParams {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  Parameter* running_mean = nullptr;
  Parameter* running_var = nullptr;

  static BatchNormParams create(ParameterSet& params, const std::string& prefix,
                                std::size_t channels, DType dtype);
  Var forward(Graph& g, Var x, ops::NormMode mode) const;
};

/// conv -> batch_norm -> relu.
struct ConvBnRelu {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  BatchNormParams norm;
  ops::Conv2dOptions conv;

  static ConvBnRelu create(ParameterSet& params, const std::string& prefix, std::size_t in,
                           std::size_t out, std::size_t kernel, ops::Conv2dOptions conv,
                           DType dtype, std::mt19937_64& rng);
  Var forward(Graph& g, Var x, ops::NormMode mode) const;
  std::size_t in_channels() const { return weight->value.dim(1); }
  std::size_t out_channels() const { return weight->value.dim(0); }
};

}  // namespace hdca
