#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace graphinf {

namespace detail {

// SplitMix64 step; used to derive well-separated child seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Deterministic, seedable random stream. Streams are split, not shared:
/// every stochastic operation takes the stream it may advance, and parallel
/// work derives independent child streams from a parent via child().
///
/// Normal variates come from an explicit Box-Muller transform on top of
/// mt19937_64, so output is bit-identical for a given seed regardless of
/// the standard library in use.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_material_(seed) {
    std::uint64_t s = seed;
    engine_.seed(detail::splitmix64(s));
  }

  /// Independent child stream; child(i) is reproducible and does not
  /// advance or alias this stream's state.
  RngStream child(std::uint64_t key) const {
    std::uint64_t s = seed_material_ ^ (0x517cc1b727220a95ULL * (key + 1));
    return RngStream(detail::splitmix64(s));
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller (pairs cached).
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

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_material_ = 0;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace graphinf
