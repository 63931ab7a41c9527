#include "fcbgan/substrate/layers.hpp"

#include <cmath>

namespace fcbgan {

Conv2d::Conv2d(std::int64_t in_channels, std::int64_t out_channels, Rng& rng, ConvOptions opts)
    : in_(in_channels), out_(out_channels), opts_(opts) {
  if (opts_.pad < 0) opts_.pad = opts_.kernel / 2;
  const double fan_in = static_cast<double>(in_channels * opts_.kernel * opts_.kernel);
  weight_ = &add_param("weight", rng.normal_tensor({out_channels, in_channels, opts_.kernel, opts_.kernel},
                                                   std::sqrt(2.0 / fan_in)));
  if (opts_.bias) bias_ = &add_param("bias", Tensor::zeros({out_channels}));
  if (opts_.spectral) init_spectral_state(*weight_, rng);
}

Var Conv2d::effective_weight() {
  if (!opts_.spectral) return weight_->var();
  return spectral_normalize(*weight_, training() ? 1 : 0).weight;
}

Var Conv2d::forward(const Var& x) {
  return conv2d(x, effective_weight(), bias_ ? bias_->var() : Var(), opts_.stride, opts_.pad);
}

Dense::Dense(std::int64_t in_features, std::int64_t out_features, Rng& rng, bool spectral) : spectral_(spectral) {
  weight_ = &add_param("weight", rng.normal_tensor({out_features, in_features},
                                                   std::sqrt(2.0 / static_cast<double>(in_features))));
  bias_ = &add_param("bias", Tensor::zeros({out_features}));
  if (spectral_) init_spectral_state(*weight_, rng);
}

Var Dense::forward(const Var& x) {
  Var w = spectral_ ? spectral_normalize(*weight_, training() ? 1 : 0).weight : weight_->var();
  return dense(x, w, bias_->var());
}

BatchNorm2d::BatchNorm2d(std::int64_t channels) {
  gamma_ = &add_param("gamma", Tensor::full({channels}, 1.0));
  beta_ = &add_param("beta", Tensor::zeros({channels}));
  stats_.running_mean = Tensor::zeros({channels});
  stats_.running_var = Tensor::full({channels}, 1.0);
  add_stats("stats", stats_);
}

Var BatchNorm2d::forward(const Var& x) {
  BatchNormOptions opts;
  opts.training = training();
  opts.momentum = kMomentum;
  opts.eps = kEps;
  opts.update_stats = !stats_frozen();
  return batchnorm(x, gamma_->var(), beta_->var(), stats_, opts);
}

}  // namespace fcbgan
