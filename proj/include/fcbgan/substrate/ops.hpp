#pragma once

#include "fcbgan/substrate/autograd.hpp"

// Differentiable ops. Every op records a graph node when grad mode is on and
// an input requires a gradient. Unless noted, backward passes are expressed
// in terms of these same ops, so gradients can be differentiated again.
// Binary elementwise ops require identical shapes; broadcasting is explicit.

namespace fcbgan {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);
/// x * s where s holds one element.
Var scale_by(const Var& x, const Var& s);
/// 1 / s, elementwise.
Var reciprocal(const Var& s);

Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
/// log(1 + e^x), evaluated as max(x, 0) + log(1 + e^-|x|).
Var softplus(const Var& x);

/// Sum of all entries, shape [1].
Var sum(const Var& x);
Var mean(const Var& x);
/// Broadcasts a one-element Var to `shape`.
Var expand(const Var& s, const Shape& shape);

Var reshape(const Var& x, const Shape& shape);
/// Rank-2 transpose.
Var transpose(const Var& x);
/// [M,K] x [K,N] -> [M,N].
Var matmul(const Var& a, const Var& b);
/// x [B,in], w [out,in], b [out] (may be undefined) -> [B,out].
Var dense(const Var& x, const Var& w, const Var& b);

/// Adds b[C] along dim 1 of a rank-2 or rank-4 tensor.
Var add_channel_bias(const Var& x, const Var& b);
/// Sums a rank-2 or rank-4 tensor down to its dim-1 extent, shape [C].
Var sum_to_channels(const Var& x);
/// Inverse of sum_to_channels: repeats b[C] over every other dim of `like`.
Var broadcast_channels(const Var& b, const Shape& like);

/// Concatenates along dim 0 (batch) or dim 1 (channels); other dims must match.
Var concat(const Var& a, const Var& b, int dim);
Var concat_channels(const Var& a, const Var& b);
Var slice(const Var& x, int dim, std::int64_t start, std::int64_t length);
/// Places x at [start, start + x.dim(dim)) of a zero tensor with extent `total` along dim.
Var embed(const Var& x, int dim, std::int64_t start, std::int64_t total);

Var upsample_nearest2x(const Var& x);
Var avgpool2x(const Var& x);
/// [B,C,H,W] -> [B,C], summing over space.
Var global_sum_pool(const Var& x);
/// [B,C] -> [B,C,H,W], repeating over space.
Var broadcast_spatial(const Var& x, std::int64_t height, std::int64_t width);
/// [1,...] -> [batch,...].
Var broadcast_batch(const Var& x, std::int64_t batch);
/// [B,...] -> [1,...].
Var sum_batch(const Var& x);

/// x [B,Cin,H,W], w [Cout,Cin,k,k], b [Cout] or undefined.
/// Output spatial size is (H + 2 pad - k) / stride + 1 and must be integral.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
/// Gradient of conv2d w.r.t. its input, as an op of (grad_out, w).
Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& input_shape, int stride, int pad);
/// Gradient of conv2d w.r.t. its weight, as an op of (x, grad_out).
Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& weight_shape, int stride, int pad);

struct BatchNormStats {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C], unbiased
  bool initialized = false;
};

struct BatchNormOptions {
  bool training = true;
  /// Weight kept on the old running value: new = momentum * old + (1 - momentum) * batch.
  double momentum = 0.9;
  double eps = 1e-5;
  /// When false, training mode normalizes with batch statistics but leaves
  /// the running statistics untouched.
  bool update_stats = true;
};

/// Per-channel batch normalization of x [B,C,H,W] with affine gamma, beta [C].
/// First-order only. Eval mode before any training-mode call raises
/// std::logic_error.
Var batchnorm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
              const BatchNormOptions& opts);

}  // namespace fcbgan
