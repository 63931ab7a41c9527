#pragma once

#include "fcbgan/substrate/module.hpp"
#include "fcbgan/substrate/rng.hpp"
#include "fcbgan/substrate/spectral_norm.hpp"

namespace fcbgan {

struct ConvOptions {
  int kernel = 3;
  int stride = 1;
  int pad = -1;  // -1: "same" padding, kernel / 2
  bool bias = true;
  bool spectral = false;
};

/// 2-D convolution with fan-in scaled Gaussian init (std = sqrt(2 / fan_in))
/// and zero bias. With `spectral`, the weight is divided by its spectral
/// norm estimate on every forward.
class Conv2d : public Module {
 public:
  Conv2d(std::int64_t in_channels, std::int64_t out_channels, Rng& rng, ConvOptions opts = {});

  Var forward(const Var& x);
  /// The weight actually applied: raw, or spectrally normalized.
  Var effective_weight();

  Param& weight() { return *weight_; }
  Param* bias() { return bias_; }
  std::int64_t in_channels() const { return in_; }
  std::int64_t out_channels() const { return out_; }

 private:
  std::int64_t in_, out_;
  ConvOptions opts_;
  Param* weight_;
  Param* bias_ = nullptr;
};

class Dense : public Module {
 public:
  Dense(std::int64_t in_features, std::int64_t out_features, Rng& rng, bool spectral = false);

  Var forward(const Var& x);
  Param& weight() { return *weight_; }
  Param& bias() { return *bias_; }

 private:
  bool spectral_;
  Param* weight_;
  Param* bias_;
};

/// Per-channel batch normalization, eps 1e-5, running-stat momentum 0.9.
class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(std::int64_t channels);

  Var forward(const Var& x);
  BatchNormStats& stats() { return stats_; }
  Param& gamma() { return *gamma_; }
  Param& beta() { return *beta_; }

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.9;

 private:
  Param* gamma_;
  Param* beta_;
  BatchNormStats stats_;
};

}  // namespace fcbgan
