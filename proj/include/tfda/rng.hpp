#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace tfda {

// splitmix64 finalizer; good avalanche, cheap, fully portable.
inline std::uint64_t scramble64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Folds a stream coordinate into a seed. Used to derive independent
// deterministic streams from one global seed, e.g.
// hash_combine(hash_combine(seed, epoch), sample_index).
inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t x) {
  h ^= scramble64(x) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  return scramble64(h);
}

inline std::uint64_t stream_id(std::uint64_t seed, std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = scramble64(seed);
  for (std::uint64_t c : coords) h = hash_combine(h, c);
  return h;
}

// Deterministic PRNG (splitmix64 core). Distribution code is written out
// here rather than taken from <random> because libstdc++'s distributions
// are implementation-defined and would break cross-build reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0,n). Modulo bias is < 2^-50 for any desk-scale n; determinism matters
  // here, statistical perfection does not.
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  // Box-Muller, cosine branch only; consumes exactly two uniforms per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

 private:
  std::uint64_t state_;
};

}  // namespace tfda
