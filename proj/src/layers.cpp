#include "uadi/layers.hpp"

#include <cmath>

namespace uadi {

Tensor he_normal(const Shape& shape, int fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(shape, std::move(v), true);
}

Dense::Dense(int in, int out, Rng& rng)
    : weight(he_normal({in, out}, in, rng)), bias(Tensor::zeros({out}, true)) {}

void Dense::zero() {
  std::fill(weight.data().begin(), weight.data().end(), 0.0);
  std::fill(bias.data().begin(), bias.data().end(), 0.0);
}

void Dense::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

Conv2d::Conv2d(int kernel, int in, int out, Rng& rng, int stride_, int dilation_)
    : weight(he_normal({kernel, kernel, in, out}, kernel * kernel * in, rng)),
      bias(Tensor::zeros({out}, true)),
      stride(stride_),
      dilation(dilation_) {}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

DepthwiseConv2d::DepthwiseConv2d(int kernel, int channels, int dilation_, Rng& rng)
    : weight(he_normal({kernel, kernel, channels}, kernel * kernel, rng)),
      bias(Tensor::zeros({channels}, true)),
      dilation(dilation_) {}

void DepthwiseConv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

ConvTranspose2x2::ConvTranspose2x2(int in, int out, Rng& rng)
    : weight(he_normal({in, 2, 2, out}, in, rng)), bias(Tensor::zeros({out}, true)) {}

void ConvTranspose2x2::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

BatchNorm::BatchNorm(int channels)
    : gamma(Tensor::full({channels}, 1.0, true)),
      beta(Tensor::zeros({channels}, true)),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)) {}

void BatchNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma, true});
  out.push_back({prefix + ".beta", beta, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
}

ConvBnRelu::ConvBnRelu(int in, int out, Rng& rng, int stride)
    : conv(3, in, out, rng, stride), bn(out) {}

void ConvBnRelu::collect(const std::string& prefix, ParamList& out) const {
  conv.collect(prefix + ".conv", out);
  bn.collect(prefix + ".bn", out);
}

}  // namespace uadi
