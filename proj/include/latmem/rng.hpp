#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>

namespace latmem {

// Deterministic PRNG (splitmix64 core). Hand-rolled distributions so that
// streams are reproducible across compilers and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // standard normal, Box-Muller (no caching, one draw per call)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // stable derivation of sub-stream seeds from (seed, tag) pairs
  static uint64_t derive(uint64_t seed, uint64_t tag) {
    uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL + (tag << 1));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  uint64_t state_;
};

}  // namespace latmem
