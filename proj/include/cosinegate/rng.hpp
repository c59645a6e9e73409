#pragma once

#include <cmath>
#include <cstdint>

namespace cosinegate {

// Counter-free deterministic RNG stream. All randomness in the engine flows
// through explicitly passed streams so that runs are reproducible from a
// single seed and independent streams can be derived per (seed, block, step).
//
// The uniform/normal conversions are hand-rolled rather than taken from
// <random> distributions so the byte-for-byte sequence does not depend on the
// standard library implementation.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : state_(splitmix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  // Derives a child seed; chain calls to mix in more components.
  static uint64_t mix(uint64_t a, uint64_t b) {
    return splitmix(a + 0x9e3779b97f4a7c15ull * (b + 1));
  }

  uint64_t next_u64() {
    ++draws_;
    // xorshift* step on splitmix-initialized state
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545f4914f6cdd1dull;
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; second variate cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n), n >= 1. Lemire multiply-shift; the bias at
  // 64-bit width is far below anything observable here.
  int uniform_int(int n) {
    return static_cast<int>((static_cast<__uint128_t>(next_u64()) *
                             static_cast<__uint128_t>(n)) >>
                            64);
  }

  // Number of raw draws consumed; used by purity tests.
  uint64_t draw_count() const { return draws_; }

 private:
  static uint64_t splitmix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  uint64_t state_;
  uint64_t draws_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace cosinegate
