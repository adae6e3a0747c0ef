#pragma once

#include <cstdint>

namespace itc {

// Counter-based deterministic generator (splitmix64 over a keyed counter).
// Every draw is a pure function of (seed, stream, counter), so substreams
// keyed by position/worker index are independent of draw order elsewhere.
// Integer-only construction keeps sequences identical across platforms.
class SplitMixRng {
public:
  explicit SplitMixRng(uint64_t seed, uint64_t stream = 0)
      : key_(mix(seed ^ 0x6a09e667f3bcc908ull) ^ mix(stream * 0xbb67ae8584caa73bull + 1)) {}

  // Substream generator: same seed, different stream id.
  SplitMixRng substream(uint64_t stream_delta) const {
    SplitMixRng r(0);
    r.key_ = mix(key_ + stream_delta * 0x9e3779b97f4a7c15ull);
    r.counter_ = 0;
    return r;
  }

  uint64_t next_u64() { return mix(key_ + (counter_++) * 0x9e3779b97f4a7c15ull); }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), n > 0. Rejection-free multiply-shift is fine
  // here: bias is < 2^-53 for the ranges used in this project.
  uint64_t next_below(uint64_t n) {
    return static_cast<uint64_t>(next_double() * static_cast<double>(n));
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace itc
