#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace fcbgan {

/// Result of checking one op or component against central differences over
/// several seeded random instances, in double precision.
struct CheckOutcome {
  std::string name;
  int instances = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::string worst;
  /// Parameters whose gradient is identically zero (a bias feeding straight
  /// into batchnorm); they are checked to have a vanishing numeric gradient
  /// instead of a relative error.
  int zero_grad_params = 0;
  double max_abs_numeric_on_zero = 0.0;
  /// Probes dropped because the perturbation crossed a ReLU kink.
  std::size_t kinks_skipped = 0;

  bool passed() const { return max_rel_error < tolerance && max_abs_numeric_on_zero < 1e-6; }
};

/// "ops", "ffm", "fcb", "generator", "discriminator".
std::vector<std::string> gradcheck_groups();

/// Runs one group ("all" runs every group). Networks are built at width 16.
std::vector<CheckOutcome> run_gradchecks(const std::string& group, int instances = 20);

}  // namespace fcbgan
