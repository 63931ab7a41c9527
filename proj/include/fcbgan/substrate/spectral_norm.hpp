#pragma once

#include <stdexcept>

#include "fcbgan/substrate/module.hpp"
#include "fcbgan/substrate/rng.hpp"

namespace fcbgan {

/// Raised when the weight matrix has no usable spectrum (sigma estimate 0).
class ZeroSpectrumError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct SpectralResult {
  Var weight;    // w / sigma, same shape as w
  double sigma;  // u^T W v after the power iterations
};

/// Seeds u and v with unit random vectors and runs `warmup_iters` power
/// iterations on the current weight.
void init_spectral_state(Param& w, Rng& rng, int warmup_iters = 50);

/// Runs `n_iter` power-iteration steps (updating the stored u, v in place),
/// then returns w / sigma with sigma = u^T W v. Gradients flow through W in
/// both numerator and sigma; u and v are treated as constants.
SpectralResult spectral_normalize(Param& w, int n_iter);

/// Largest singular value estimate from `n_iter` fresh power iterations,
/// without touching any stored state.
double power_iteration_sigma(const Tensor& matrix_like, Rng& rng, int n_iter);

}  // namespace fcbgan
