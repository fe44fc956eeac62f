#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>

namespace mlab {

// Deterministic splitmix64 generator with Box-Muller normals. Avoids the
// standard <random> distributions on purpose: their output is
// implementation-defined, and the lab's reports must reproduce bit-identically
// across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound). bound must be positive.
  std::uint64_t uniform_int(std::uint64_t bound) {
    // Rejection-free modulo is biased only by ~2^-64 * bound; fine for lab use
    // where bound << 2^64, and it keeps the draw count deterministic.
    return next_u64() % bound;
  }

  // Standard normal via Box-Muller (cosine branch only, so every draw
  // consumes exactly two uniforms).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  void fill_normal(double* dst, std::size_t n, double sigma = 1.0) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = sigma * normal();
  }

  // Derive an independent stream from (seed, stream); used to hand workers
  // and per-sample loops their own deterministic generators.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    Rng mix(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
    mix.next_u64();
    return mix.next_u64();
  }

 private:
  std::uint64_t state_;
};

}  // namespace mlab
