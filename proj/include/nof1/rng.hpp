// Deterministic random number generation with independently seedable
// streams. Every stream is derived from (seed, stream id) by integer
// mixing only, so simulation output does not depend on how work is split
// across draws, copies, or workers.
#ifndef NOF1_RNG_HPP
#define NOF1_RNG_HPP

#include <cmath>
#include <cstdint>

namespace nof1 {

// splitmix64 finalizer; used both as a stream-key mixer and to expand a
// seed into generator state.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2)));
}

// xoshiro256++ with explicit Box-Muller normals. Not std:: distributions:
// their output is implementation-defined and would break byte-identical
// reruns across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t z = seed;
    for (auto& word : state_) word = mix64(z++);
  }

  // Independent stream for a given purpose/index tuple.
  static Rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                    std::uint64_t c = 0) {
    return Rng(mix64(mix64(mix64(seed, a), b), c));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform on [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; the spare deviate is cached per stream.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t state_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace nof1

#endif  // NOF1_RNG_HPP
