// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include "peftlab/model_config.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

/// Every weight of the targeted projections, plus embedding, head and norm
/// gains.
struct FullFT {};

struct LoraSpec {
  int rank = 8;
  double alpha = 32;
  double dropout = 0.1;
};

/// Partial-column tuning in every block. When `match_lora_rank` is set the
/// per-matrix width comes from match_paca_width() instead of `mask_width`.
struct PacaSpec {
  int mask_width = 16;
  std::optional<int> match_lora_rank;
};

/// Partial-column tuning restricted to the top `k_layers` blocks; all
/// lower blocks are frozen and skipped by backward. k_layers = 0 is the
/// "no tuning" baseline.
struct SelectivePacaSpec {
  int k_layers = 1;
  int mask_width = 16;
  std::optional<int> match_lora_rank;
};

using StrategyVariant = std::variant<FullFT, LoraSpec, PacaSpec, SelectivePacaSpec>;

struct StrategyConfig {
  StrategyVariant variant = FullFT{};
  TargetSet targets = TargetSet::all();
  std::uint64_t seed = 0;
  std::string label;  // display name override

  /// `label` if set, otherwise e.g. "lora_r8", "selective_paca_k2".
  std::string name() const;
  /// "full" | "lora" | "paca" | "selective_paca"
  std::string_view variant_name() const noexcept;
  /// Throws ConfigError naming the offending field.
  void validate(const ModelConfig& cfg) const;
};

/// Index of the lowest block the strategy tunes (L when none).
int first_tuned_block(const ModelConfig& cfg, const StrategyConfig& s);

/// Mask width used for one target matrix of a PaCA-family strategy.
int mask_width_for(const ModelConfig& cfg, const StrategyConfig& s, Target t);

/// Resets adapters/masks and marks the strategy's parameters trainable.
/// LoRA: A ~ N(0, 0.02^2), B = 0. PaCA: uniformly random columns per
/// matrix, fixed for the run. Seeds derive from (seed, block, target).
void apply_strategy(TransformerModel& model, const StrategyConfig& s);

/// Column count that gives K tuned blocks the parameter budget of LoRA
/// rank r on all L blocks: round(L r (d_in + d_out) / (K d_out)).
/// Throws ContractViolation unless 1 <= K <= L.
int match_paca_width(int layers, int k_layers, int lora_rank, int d_in, int d_out);

struct PacaPreset {
  int layers = 0;
  int k_layers = 0;
  int lora_rank = 0;
  int mask_width = 0;
  /// PaCA parameters over LoRA parameters, minus one (square matrices).
  double budget_excess = 0;
};

/// Mask widths used for the 32-layer, rank-8 comparison (K = 32 -> 16,
/// K = 16 -> 32, K = 24 -> 24). The K = 24 row overshoots the exact rule
/// (21) by 12.5% and logs a warning. Other inputs fall back to the exact
/// rule.
PacaPreset paca_preset(int layers, int k_layers, int lora_rank);

/// Exact count of parameters the strategy trains.
std::uint64_t trainable_params(const ModelConfig& cfg, const StrategyConfig& s);

}  // namespace peftlab
