#pragma once

// Counter-based generator: the n-th draw of a stream is a pure function of
// (key, n), so any draw can be reproduced without replaying the stream.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace pykv {

// SplitMix64 output function (Steele, Lea, Flood 2014).
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t key) : key_(splitmix64(key)) {}

  // Independent sub-stream, e.g. one per sequence of a batch.
  constexpr CounterRng stream(std::uint64_t id) const { return CounterRng(key_ ^ splitmix64(~id), 0); }

  constexpr std::uint64_t bits(std::uint64_t counter) const { return splitmix64(key_ + splitmix64(counter)); }

  // Uniform in (0, 1).
  double uniform(std::uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  // Box-Muller over counters (2n, 2n+1).
  double normal(std::uint64_t n) const {
    const double u1 = uniform(2 * n);
    const double u2 = uniform(2 * n + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t counter, std::uint64_t bound) const { return bits(counter) % bound; }

 private:
  constexpr CounterRng(std::uint64_t raw_key, int) : key_(raw_key) {}
  std::uint64_t key_;
};

}  // namespace pykv
