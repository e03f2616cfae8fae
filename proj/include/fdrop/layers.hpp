#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fdrop/ops.hpp"
#include "fdrop/rng.hpp"
#include "fdrop/types.hpp"

namespace fdrop {

/// Named tensor inside a model's state; non-trainable entries (batchnorm
/// running statistics) are checkpointed but never touched by the optimizer.
struct NamedParam {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

/// 3x3-style convolution without bias (a batchnorm always follows in our
/// architectures). He-normal initialized from the init stream.
struct Conv2d {
  Tensor weight;  // (out, in, k, k)
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride_, int pad_, Rng& rng)
      : weight(Shape{out_ch, in_ch, kernel, kernel}, /*requires_grad=*/true),
        stride(stride_),
        pad(pad_) {
    const double fan_in = static_cast<double>(in_ch) * kernel * kernel;
    fill_normal(weight, rng, 0.0, std::sqrt(2.0 / fan_in));
  }

  Tensor forward(Tape* tape, const Tensor& x) const {
    return conv2d(x, weight, nullptr, stride, pad, tape);
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight, true});
  }
};

struct BatchNorm2d {
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : gamma(Tensor::ones(Shape{channels})),
        beta(Shape{channels}, /*requires_grad=*/true),
        running_mean(Tensor::zeros(Shape{channels})),
        running_var(Tensor::ones(Shape{channels})) {
    gamma.set_requires_grad(true);
  }

  Tensor forward(Tape* tape, const Tensor& x, bool training) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                       momentum, eps, tape);
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
  }
};

struct Linear {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)

  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng)
      : weight(Shape{in_features, out_features}, /*requires_grad=*/true),
        bias(Shape{out_features}, /*requires_grad=*/true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    fill_uniform(weight, rng, -bound, bound);
    fill_uniform(bias, rng, -bound, bound);
  }

  Tensor forward(Tape* tape, const Tensor& x) const {
    return linear(x, weight, bias, tape);
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight, true});
    out.push_back({prefix + ".bias", bias, true});
  }
};

}  // namespace fdrop
