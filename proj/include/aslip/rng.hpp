#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace aslip {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent child seeds from a master seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return mix_seed(master ^ mix_seed(stream + 0x632BE59BD9B4E019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(master, a), b);
}

// The helpers below avoid std::*_distribution so that streams are identical
// across standard library implementations.

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  return static_cast<std::uint64_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

/// Standard normal via Box-Muller (one draw per call; the pair partner is discarded).
inline double normal01(Rng& rng) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace aslip
