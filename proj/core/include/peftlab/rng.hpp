// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>

namespace peftlab {

/// splitmix64 step; used for seeding and for deriving independent
/// sub-seeds from (seed, index) pairs.
std::uint64_t splitmix64(std::uint64_t& state) noexcept;

/// Mixes a list of integers into a single seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0) noexcept;

/// xoshiro256** (Blackman & Vigna), state filled from splitmix64(seed).
/// The integer stream is identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform integer in [0, n); unbiased (Lemire's multiply-and-reject).
  std::uint64_t uniform_int(std::uint64_t n) noexcept;
  /// Standard normal via the basic Box-Muller cosine branch; one normal per
  /// two uniforms, no cached second value.
  double normal() noexcept;

 private:
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace peftlab
