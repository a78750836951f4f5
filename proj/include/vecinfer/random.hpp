#pragma once

// Portable deterministic sampling. std::mt19937_64 output is fixed by the
// standard, but the std:: distributions are not, so the transforms from raw
// bits to floating point live here.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace vecinfer {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Slight modulo bias is irrelevant at our n.
  std::uint64_t uniform_index(std::uint64_t n) { return engine_() % n; }

  /// Standard normal via Box-Muller; one value per call.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Laplace with unit variance (scale 1/sqrt(2)).
  double laplace() {
    double u = uniform() - 0.5;
    while (u <= -0.5) u = uniform() - 0.5;
    const double scale = 1.0 / std::numbers::sqrt2;
    const double mag = std::log1p(-2.0 * std::abs(u));
    return u < 0.0 ? scale * mag : -scale * mag;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace vecinfer
