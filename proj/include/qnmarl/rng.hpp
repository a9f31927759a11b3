#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "qnmarl/errors.hpp"

namespace qnmarl {

/**
 * Deterministic pseudo-random stream based on splitmix64.
 *
 * Every stochastic component of a run (world generation, shot sampling,
 * rate encoding, exploration, weight init) draws from its own stream,
 * derived from the master seed and a fixed tag path. Streams are therefore
 * independent of call interleaving elsewhere in the program, which is what
 * makes whole runs replay bit-exactly from a single seed.
 *
 * All floating-point draws are built from the raw 64-bit output with fixed
 * arithmetic (no std::distribution types), so sequences are identical across
 * standard library implementations.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  /// Derives an independent stream from a master seed and a tag path, e.g.
  /// Rng::derive(master, {kStreamWorld, episode}).
  static Rng derive(std::uint64_t master,
                    std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = scramble(master ^ kGolden);
    for (std::uint64_t tag : path) {
      s = scramble(s ^ (tag * kGolden));
    }
    return Rng(s);
  }

  /// Next raw 64-bit value (splitmix64 step).
  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += kGolden);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1), 53 bits of precision.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double next_range(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  /// Uniform integer in [0, bound); bound must be positive. Unbiased.
  std::uint64_t next_below(std::uint64_t bound) {
    if (bound == 0) {
      throw UsageError("Rng::next_below: bound must be positive");
    }
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % bound;
    }
  }

  /// Standard normal via Box-Muller. Draws two uniforms per call; no cached
  /// state, so the stream position stays a pure function of the call count.
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Bernoulli draw with success probability p (clamped to [0, 1]).
  bool next_bernoulli(double p) { return next_double() < p; }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  static std::uint64_t scramble(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

// Stream tags. Each subsystem owns one tag; per-agent / per-episode indices
// are appended after the tag in the derivation path.
inline constexpr std::uint64_t kStreamWorld = 1;
inline constexpr std::uint64_t kStreamAgentAct = 2;
inline constexpr std::uint64_t kStreamAgentTrain = 3;
inline constexpr std::uint64_t kStreamInit = 4;
inline constexpr std::uint64_t kStreamEval = 5;
inline constexpr std::uint64_t kStreamDemo = 6;

}  // namespace qnmarl
