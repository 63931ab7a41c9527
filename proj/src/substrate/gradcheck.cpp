#include "fcbgan/substrate/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fcbgan/substrate/rng.hpp"

namespace fcbgan {

double numeric_partial(const std::function<double()>& fn, Var& x, std::int64_t flat, double step) {
  Tensor& t = x.mutable_value();
  const double orig = t.at(flat);
  t.set(flat, orig + step);
  const double up = fn();
  t.set(flat, orig - step);
  const double down = fn();
  t.set(flat, orig);
  return (up - down) / (2.0 * step);
}

std::optional<double> smooth_partial(const std::function<double()>& fn, Var& x, std::int64_t flat, double step,
                                     double floor) {
  const double a = numeric_partial(fn, x, flat, step);
  const double b = numeric_partial(fn, x, flat, step / 2);
  if (std::abs(a - b) > 1e-4 * std::max({std::abs(a), std::abs(b), floor})) return std::nullopt;
  return b;
}

GradCheckResult gradcheck(const std::function<Var()>& fn, const std::vector<Var>& inputs,
                          const std::vector<std::string>& names, GradCheckOptions opts) {
  std::vector<Var> analytic = grad(fn(), inputs);
  auto eval = [&] {
    GradModeGuard mode(opts.eval_with_grad);
    return fn().value().at(0);
  };

  Rng rng(opts.seed);
  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Var x = inputs[i];
    const std::int64_t n = x.value().numel();
    std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    // Random order; the first `want` smooth coordinates are probed.
    for (std::size_t j = 0; j + 1 < coords.size(); ++j) {
      std::swap(coords[j], coords[j + rng.below(coords.size() - j)]);
    }
    const std::size_t want = opts.max_coords ? std::min(opts.max_coords, coords.size()) : coords.size();
    double max_diff = 0.0, max_num = 0.0;
    std::size_t probed = 0;
    for (std::size_t j = 0; j < coords.size() && probed < want; ++j) {
      const auto c = coords[j];
      double num = 0.0;
      if (opts.skip_kinks) {
        auto s = smooth_partial(eval, x, c, opts.step, opts.scale_floor);
        if (!s) {
          ++result.kinks_skipped;
          continue;
        }
        num = *s;
      } else {
        num = numeric_partial(eval, x, c, opts.step);
      }
      const double ana = analytic[i].value().at(c);
      max_diff = std::max(max_diff, std::abs(ana - num));
      max_num = std::max(max_num, std::abs(num));
      ++probed;
    }
    result.coords_checked += probed;
    const double rel = probed < want ? std::numeric_limits<double>::infinity()
                                     : max_diff / std::max(max_num, opts.scale_floor);
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_input = i < names.size() ? names[i] : "input " + std::to_string(i);
    }
  }
  return result;
}

}  // namespace fcbgan
