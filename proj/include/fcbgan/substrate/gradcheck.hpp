#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fcbgan/substrate/autograd.hpp"

namespace fcbgan {

struct GradCheckOptions {
  double step = 1e-6;
  /// Coordinates probed per input; 0 probes every coordinate. Subsets are
  /// drawn with `seed`.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  /// Floor on the per-input gradient scale, so inputs whose true gradient is
  /// zero are judged on absolute finite-difference noise.
  double scale_floor = 1e-6;
  /// Keep grad mode on while evaluating perturbed points, for functions that
  /// differentiate internally (e.g. an input-gradient penalty).
  bool eval_with_grad = false;
  /// Re-probe each coordinate at half the step; when the two estimates
  /// disagree the perturbation crossed a non-differentiable point (a ReLU
  /// kink) and the coordinate is replaced by an unprobed one.
  bool skip_kinks = true;
};

struct GradCheckResult {
  /// max over inputs of ||analytic - numeric||_inf / max(||numeric||_inf, scale_floor),
  /// over the probed coordinates.
  double max_rel_error = 0.0;
  std::string worst_input;
  std::size_t coords_checked = 0;
  std::size_t kinks_skipped = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `fn` must recompute the scalar from the current values of
/// `inputs`; the checker perturbs those values in place and restores them.
/// Intended for f64 inputs.
GradCheckResult gradcheck(const std::function<Var()>& fn, const std::vector<Var>& inputs,
                          const std::vector<std::string>& names = {}, GradCheckOptions opts = {});

/// Central-difference derivative of fn along coordinate `flat` of `x`.
double numeric_partial(const std::function<double()>& fn, Var& x, std::int64_t flat, double step);

/// numeric_partial at `step` and `step / 2`; nullopt when they disagree by
/// more than 1e-4 of their scale (floored at `floor`).
std::optional<double> smooth_partial(const std::function<double()>& fn, Var& x, std::int64_t flat, double step,
                                     double floor);

}  // namespace fcbgan
