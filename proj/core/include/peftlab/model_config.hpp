// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bitset>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace peftlab {

/// Shape of the decoder-only transformer.
struct ModelConfig {
  int layers = 2;
  int d_model = 16;
  int n_heads = 2;
  int d_ff = 32;
  int vocab = 32;
  int seq_len = 16;
  double norm_eps = 1e-6;
  double rope_base = 10000.0;

  /// Throws ConfigError when an invariant is broken.
  void validate() const;
  int head_dim() const noexcept { return d_model / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The seven projection matrices of a block that tuning strategies may
/// target, in canonical order.
enum class Target : int { Q = 0, K, V, O, Up, Down, Gate };
inline constexpr std::size_t kNumTargets = 7;
inline constexpr std::array<Target, kNumTargets> kAllTargets = {
    Target::Q, Target::K, Target::V, Target::O, Target::Up, Target::Down, Target::Gate};

std::string_view target_name(Target t) noexcept;
std::optional<Target> parse_target(std::string_view name) noexcept;

struct MatrixShape {
  int d_out = 0;
  int d_in = 0;
};
MatrixShape target_shape(const ModelConfig& cfg, Target t) noexcept;

class TargetSet {
 public:
  TargetSet() = default;
  static TargetSet all() noexcept;

  bool contains(Target t) const noexcept { return bits_.test(static_cast<std::size_t>(t)); }
  void insert(Target t) noexcept { bits_.set(static_cast<std::size_t>(t)); }
  bool empty() const noexcept { return bits_.none(); }
  std::size_t size() const noexcept { return bits_.count(); }

  friend bool operator==(const TargetSet&, const TargetSet&) = default;

 private:
  std::bitset<kNumTargets> bits_;
};

/// FNV-1a over the canonical text form of the config, as 16 hex digits.
std::string config_hash(const ModelConfig& cfg);

}  // namespace peftlab
