#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace rp {

// splitmix64, used to derive independent child seeds from one master seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic random stream. All distribution transforms are hand-rolled
// on top of mt19937_64 so that draws are bit-identical across standard
// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Child stream k of this seed; independent of draws made on the parent.
  static Rng substream(std::uint64_t seed, std::uint64_t k) {
    std::uint64_t s = seed + 0x632be59bd9b4e019ULL * (k + 1);
    return Rng(splitmix64(s));
  }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= lim);
    return x % n;
  }

  // Standard normal via Box-Muller (one value per call, cache the pair).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace rp
