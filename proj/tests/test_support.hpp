#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "fcbgan/substrate/autograd.hpp"
#include "fcbgan/substrate/gradcheck.hpp"
#include "fcbgan/substrate/ops.hpp"
#include "fcbgan/substrate/rng.hpp"

namespace fcbgan::testing {

inline Var random_var(Rng& rng, const Shape& shape, double stddev = 1.0, bool requires_grad = true) {
  return Var(rng.normal_tensor(shape, stddev, DType::f64), requires_grad);
}

/// Reduces a tensor-valued op to a scalar through a fixed random projection,
/// so every output coordinate contributes a distinct weight to the gradient.
inline Var project(const Var& out, std::uint64_t seed) {
  Rng rng(seed);
  Var r(rng.normal_tensor(out.shape(), 1.0, out.dtype()));
  return sum(mul(out, r));
}

inline double check_op(const std::function<Var()>& op, const std::vector<Var>& inputs, std::uint64_t seed,
                       GradCheckOptions opts = {}) {
  auto fn = [&] { return project(op(), seed ^ 0x9e3779b97f4a7c15ULL); };
  return gradcheck(fn, inputs, {}, opts).max_rel_error;
}

}  // namespace fcbgan::testing
