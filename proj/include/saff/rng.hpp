#pragma once

#include <cmath>
#include <cstdint>

namespace saff {

// SplitMix64 state mix. Fully specified so other implementations can
// reproduce the stream from the same seed.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Portable seedable generator: SplitMix64 for raw 64-bit words,
// 53-bit mantissa uniforms, Box-Muller normals (cosine drawn first,
// sine cached). Stream splitting is split(i) = state ^ mix64(golden*(i+1)).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix64(state_);
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double two_pi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(two_pi * u2);
    have_spare_ = true;
    return r * std::cos(two_pi * u2);
  }

  // unbiased integer in [0,n)
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t threshold = (0ull - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // derive an independent stream (one per worker / per purpose)
  Rng split(std::uint64_t stream) const {
    return Rng(state_ ^ mix64(0x9e3779b97f4a7c15ull * (stream + 1)));
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace saff
