#pragma once

#include <string>
#include <vector>

#include "uadi/random.hpp"
#include "uadi/tensor.hpp"

namespace uadi {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using ParamList = std::vector<NamedTensor>;

/// He-normal initialised tensor with standard deviation sqrt(2 / fan_in).
Tensor he_normal(const Shape& shape, int fan_in, Rng& rng);

struct Dense {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)

  Dense() = default;
  Dense(int in, int out, Rng& rng);

  int in_features() const { return weight.dim(0); }
  int out_features() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  /// Zeroes weights and bias, so the layer outputs 0 for every input.
  void zero();
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv2d {
  Tensor weight;  // (k, k, in, out)
  Tensor bias;    // (out)
  int stride = 1;
  int dilation = 1;

  Conv2d() = default;
  Conv2d(int kernel, int in, int out, Rng& rng, int stride = 1, int dilation = 1);

  int in_channels() const { return weight.dim(2); }
  int out_channels() const { return weight.dim(3); }
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, dilation); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct DepthwiseConv2d {
  Tensor weight;  // (k, k, C)
  Tensor bias;    // (C)
  int dilation = 1;

  DepthwiseConv2d() = default;
  DepthwiseConv2d(int kernel, int channels, int dilation, Rng& rng);

  Tensor operator()(const Tensor& x) const { return depthwise_conv2d(x, weight, bias, dilation); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct ConvTranspose2x2 {
  Tensor weight;  // (in, 2, 2, out)
  Tensor bias;    // (out)

  ConvTranspose2x2() = default;
  ConvTranspose2x2(int in, int out, Rng& rng);

  Tensor operator()(const Tensor& x) const { return conv_transpose2x2(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct BatchNorm {
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(int channels);

  Tensor operator()(const Tensor& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
  }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// conv3x3 -> BN -> relu.
struct ConvBnRelu {
  Conv2d conv;
  BatchNorm bn;

  ConvBnRelu() = default;
  ConvBnRelu(int in, int out, Rng& rng, int stride = 1);

  Tensor operator()(const Tensor& x, bool training) { return relu(bn(conv(x), training)); }
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace uadi
