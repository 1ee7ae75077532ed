#pragma once

#include <cstdint>

namespace enstom {

// splitmix64: tiny, fully deterministic across platforms. std:: distributions
// are implementation-defined, which would break byte-identical fixtures.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double unit() { return double(next() >> 11) * 0x1.0p-53; }

  // Uniform in [-scale, scale).
  float symmetric(float scale) {
    return float(2.0 * unit() - 1.0) * scale;
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next() % n; }

 private:
  std::uint64_t state_;
};

}  // namespace enstom
