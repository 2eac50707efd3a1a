#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace cbqa {

// Stateless counter-based generator: every draw is a pure function of
// (key, counter), so any subsequence can be regenerated without replaying
// earlier draws.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream)
      : key_(mix(mix(seed ^ 0x243F6A8885A308D3ull) ^ stream)) {}

  // Derives an independent generator for a sub-stream (layer, site, ...).
  constexpr CounterRng fork(std::uint64_t substream) const {
    return CounterRng(key_, substream, Raw{});
  }

  constexpr std::uint64_t bits(std::uint64_t counter) const {
    return mix(key_ ^ mix(counter + 0x9E3779B97F4A7C15ull));
  }

  // Uniform on [0, 1) with 53 random bits.
  constexpr double uniform(std::uint64_t counter) const {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  // Unbiased integer in [0, n) by rejection; `counter` selects the draw and
  // rejected candidates consume the high half of the counter space.
  std::uint64_t below(std::uint64_t n, std::uint64_t counter) const {
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    for (std::uint64_t attempt = 0;; ++attempt) {
      const std::uint64_t x = bits(counter ^ (attempt << 48));
      if (x < limit) return x % n;
    }
  }

  // Standard normal via Box-Muller on draws 2*counter and 2*counter+1.
  double normal(std::uint64_t counter) const {
    double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  struct Raw {};
  constexpr CounterRng(std::uint64_t parent, std::uint64_t substream, Raw)
      : key_(mix(parent ^ mix(substream ^ 0x13198A2E03707344ull))) {}

  std::uint64_t key_;
};

}  // namespace cbqa
