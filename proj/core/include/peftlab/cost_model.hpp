// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Closed-form matmul FLOP and kernel counts per tuning strategy, and a
// two-parameter device model: time = kernels * launch_overhead +
// flops / throughput. Only projection matmuls are counted; the same
// convention as OpCounter's matmul class restricted to projection tags.

#include <cstdint>
#include <optional>
#include <span>

#include "peftlab/model_config.hpp"
#include "peftlab/strategy.hpp"

namespace peftlab {

/// One projection: X_out (d_out x tokens) = W (d_out x d_in) X_in.
struct LayerDims {
  std::int64_t d_in = 1;
  std::int64_t d_out = 1;
  std::int64_t tokens = 1;  // batch * sequence length
};

struct CostEstimate {
  std::uint64_t fwd_flops = 0;
  std::uint64_t bwd_flops = 0;
  std::uint64_t fwd_kernels = 0;
  std::uint64_t bwd_kernels = 0;
  std::uint64_t trainable_params = 0;
  std::optional<double> predicted_fwd_seconds;
  std::optional<double> predicted_bwd_seconds;

  std::uint64_t total_flops() const noexcept { return fwd_flops + bwd_flops; }
  std::uint64_t total_kernels() const noexcept { return fwd_kernels + bwd_kernels; }

  /// Adds counts; predictions are dropped.
  CostEstimate& operator+=(const CostEstimate& o) noexcept;
};

/// fwd 2 N d_out d_in (1 kernel); bwd the input gradient (when
/// `input_grad`) plus the weight gradient, 2 N d_out d_in each.
CostEstimate cost_fullft(const LayerDims& dims, bool input_grad = true);
/// fwd W X, A X, B (A X): 3 kernels. bwd B^T dY, dY X_mid^T, dX_mid X^T and,
/// with `input_grad`, W^T dY and A^T dX_mid: 5 kernels (3 without).
CostEstimate cost_lora(const LayerDims& dims, std::int64_t rank, bool input_grad = true);
/// fwd 1 kernel; bwd the input gradient plus the m-column weight gradient
/// (no kernel when m = 0).
CostEstimate cost_paca(const LayerDims& dims, std::int64_t mask_width, bool input_grad = true);
/// A frozen projection inside the backpropagated region.
CostEstimate cost_frozen(const LayerDims& dims, bool input_grad);

/// Model-wide sum over all seven projections of every block for `tokens`
/// tokens. Blocks below the lowest tuned block contribute forward cost
/// only; inside the backpropagated region an input gradient is counted
/// only when something beneath that matrix is trainable, so the lowest
/// tuned block skips the Q/K/V input gradients. Throws ConfigError when
/// the strategy is invalid for the config (e.g. K > L).
CostEstimate cost_selective(const ModelConfig& cfg, const StrategyConfig& strategy, std::int64_t tokens);

struct DeviceProfile {
  double throughput = 1e9;      // FLOP/s, > 0
  double launch_overhead = 0;   // seconds per kernel, >= 0
};

struct PhaseTimes {
  double fwd_seconds = 0;
  double bwd_seconds = 0;
};

PhaseTimes predict_time(const CostEstimate& est, const DeviceProfile& profile);
/// Copy of `est` with the predicted_* fields filled in.
CostEstimate with_prediction(CostEstimate est, const DeviceProfile& profile);

struct CalibrationPoint {
  std::uint64_t flops = 0;
  std::uint64_t kernels = 0;
  double seconds = 0;
};
CalibrationPoint forward_point(const CostEstimate& est, double seconds);
CalibrationPoint backward_point(const CostEstimate& est, double seconds);

/// Least-squares fit of (1 / throughput, launch_overhead) with
/// non-negativity clamping. Throws ContractViolation for fewer than two
/// points or when every point has the same kernel/FLOP ratio.
DeviceProfile calibrate_profile(std::span<const CalibrationPoint> points);

/// Largest rank whose total (fwd + bwd) LoRA FLOPs stay strictly below
/// full fine-tuning, i.e. the largest r with 3 r (d_in + d_out) < d_in d_out.
/// 0 when no rank qualifies.
std::int64_t lora_break_even_rank(std::int64_t d_in, std::int64_t d_out);

/// Launch overhead above which `slower_kernels` (more kernels, fewer FLOPs)
/// takes longer than `baseline`: (F_base - F) / (throughput * (K - K_base)).
/// nullopt when the candidate does not launch more kernels.
std::optional<double> launch_overhead_threshold(const CostEstimate& candidate, const CostEstimate& baseline,
                                                double throughput);

}  // namespace peftlab
