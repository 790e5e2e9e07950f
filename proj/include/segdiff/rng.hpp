#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace segdiff {

/// Deterministic random source. Wraps std::mt19937_64 (whose output sequence
/// is fixed by the standard) and derives all variates with explicit, portable
/// algorithms so that streams are bit-reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  /// Independent stream derived from (master seed, stream index). Used for
  /// per-sample / per-image streams so results do not depend on scheduling.
  static Rng stream(std::uint64_t master_seed, std::uint64_t index) {
    return Rng(mix64(master_seed ^ mix64(index + 0x632be59bd9b4e019ull)));
  }

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], both inclusive.
  int uniform_int(int lo, int hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    const auto wide = static_cast<unsigned __int128>(eng_()) * range;
    return lo + static_cast<int>(wide >> 64);
  }

  bool bernoulli(double p = 0.5) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  static std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::mt19937_64 eng_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace segdiff
