#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "fcbgan/substrate/tensor.hpp"

namespace fcbgan {

/// Seeded generator whose full state is the underlying engine state, so it
/// can be saved and restored exactly. Samplers are written out here rather
/// than taken from <random> distributions, which keep hidden caches.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller; one engine pair per sample.
  double normal();

  Tensor normal_tensor(Shape shape, double stddev = 1.0, DType dtype = DType::f32);

  std::string state() const;
  void set_state(const std::string& state);

  /// Derives an independent seed for a named sub-stream.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
};

}  // namespace fcbgan
