// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace rpp {

// Deterministic 64-bit generator (splitmix64). Self-contained so that
// streams are bit-identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 53 bits of precision.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo,hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0,n).
  uint64_t next_below(uint64_t n) {
    // Rejection sampling keeps the distribution exact.
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller (no cached spare, keeps streams simple).
  double next_gaussian() {
    for (;;) {
      double u1 = next_double();
      double u2 = next_double();
      if (u1 <= 0.0) continue;
      double r = std::sqrt(-2.0 * std::log(u1));
      double g = r * std::cos(6.283185307179586476925286766559 * u2);
      if (std::isfinite(g)) return g;
    }
  }

  // Normal(0, std) resampled until within +-2 std.
  double truncated_normal(double stddev) {
    for (;;) {
      double g = next_gaussian();
      if (g >= -2.0 && g <= 2.0) return g * stddev;
    }
  }

  // Log-uniform over [lo,hi], lo > 0.
  double log_uniform(double lo, double hi) {
    return std::exp(uniform(std::log(lo), std::log(hi)));
  }

 private:
  uint64_t state_;
};

// Stream derivation: mixes a base seed with stream/step tags so that every
// consumer gets an independent deterministic substream.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

}  // namespace rpp
