#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace umsr {

// FNV-1a, used to derive independent named streams from one user seed.
inline std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Deterministic random stream. All randomness in the project flows through
// this class so that identical seeds give byte-identical results; the
// distributions are implemented here rather than taken from <random> to pin
// the exact value sequences independent of the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Stream derived from (seed, name[, index]); independent per name.
  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    return Rng(seed ^ hash_name(name) ^ (0x9e3779b97f4a7c15ull * (index + 1)));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Modulo bias is irrelevant at the ranges used here (n << 2^64).
    return n == 0 ? 0 : next_u64() % n;
  }

  // Standard normal via Box-Muller (no cached spare: keeps the stream
  // position a pure function of the number of calls).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Fisher-Yates shuffle.
  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace umsr
