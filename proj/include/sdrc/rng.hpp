#pragma once

#include <cstdint>

namespace sdrc {

// splitmix64: fixed-algorithm PRNG so seeded artifacts are bitwise
// reproducible across platforms. Constants are part of the file-format
// contract and documented in the README.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Child-stream derivation: every random decision in the artifact flows
// from one top-level seed through nested derive_seed calls.
inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) {
  std::uint64_t s = stream ^ 0xD1B54A32D192ED03ULL;
  std::uint64_t salted = splitmix64(s);
  std::uint64_t mixed = parent ^ salted;
  return splitmix64(mixed);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Multiply-shift bounded draw; bias is negligible for n << 2^64 and
    // the algorithm is platform-stable.
    unsigned __int128 m =
        static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
    return static_cast<std::uint64_t>(m >> 64);
  }

  int range_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  // Standard normal via Box-Muller without trig: polar (Marsaglia) method.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double factor = sqrt_pos(-2.0 * log_pos(s) / s);
    spare_ = v * factor;
    have_spare_ = true;
    return u * factor;
  }

 private:
  // Local sqrt/log wrappers keep <cmath> out of this header's contract;
  // both are correctly rounded on every libm we target.
  static double sqrt_pos(double x) { return __builtin_sqrt(x); }
  static double log_pos(double x) { return __builtin_log(x); }

  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sdrc
