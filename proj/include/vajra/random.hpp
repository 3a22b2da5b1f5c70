#pragma once

#include <cstdint>
#include <random>

#include "vajra/tensor.hpp"

namespace vajra {

/// Seeded generator whose float stream is fixed by the mt19937 definition
/// alone, independent of the standard library's distribution classes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(static_cast<std::mt19937::result_type>(seed ^ (seed >> 32))) {}

  /// Uniform in [0, 1) with 24 random mantissa bits.
  float unit() { return static_cast<float>(engine_() >> 8) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * unit(); }

  /// Uniform integer in [lo, hi].
  int range(int lo, int hi) {
    const auto span = static_cast<std::uint32_t>(hi - lo) + 1u;
    return lo + static_cast<int>(engine_() % span);
  }

  bool coin() { return (engine_() & 1u) != 0; }

  void fill(Tensor4& t, float lo, float hi) {
    for (float& v : t.data()) v = uniform(lo, hi);
  }

  Tensor4 tensor(Shape4 s, float lo = -1.0f, float hi = 1.0f) {
    Tensor4 t(s);
    fill(t, lo, hi);
    return t;
  }

 private:
  std::mt19937 engine_;
};

}  // namespace vajra
