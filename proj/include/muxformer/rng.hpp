#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace muxformer {

// splitmix64; used to derive independent streams from (seed, label) pairs so
// that parameter initialisation does not depend on creation order.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_str(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Deterministic generator. Self-contained (no std::*_distribution) so that
// streams are reproducible for a given seed independent of the standard
// library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix64(seed ^ 0x5851f42d4c957f2dull)) {}

  std::uint64_t next_u64() {
    state_ = mix64(state_ + 0x9e3779b97f4a7c15ull);
    return state_;
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one sample per call, no cached second value.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Rejection-sampled normal clipped to +-2 sigma, the usual ViT init.
  double trunc_normal(double stddev) {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    return z * stddev;
  }

  std::size_t index(std::size_t n) { return std::size_t(next_u64() % n); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  // Independent child stream, stable under unrelated code changes.
  Rng fork(const std::string& label) const {
    return Rng(mix64(state_ ^ hash_str(label)));
  }

 private:
  std::uint64_t state_;
};

}  // namespace muxformer
