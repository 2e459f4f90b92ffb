// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/matrix.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

/// Linear warmup from base_lr / warmup, then cosine decay to 0 at
/// total_steps.
struct Schedule {
  double base_lr = 3e-4;
  std::int64_t warmup_steps = 100;
  std::int64_t total_steps = 1000;
};

/// step < warmup: base * (step + 1) / warmup; otherwise
/// base * 0.5 * (1 + cos(pi * (step - warmup) / (total - warmup))).
/// Throws ContractViolation unless 0 <= step <= total and
/// 0 <= warmup <= total.
double lr_at(const Schedule& schedule, std::int64_t step);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. Moments are allocated lazily, on the first
/// step of each named parameter, so state only ever exists for parameters
/// that actually train.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// Advances the shared step counter; call once per optimizer step,
  /// before the per-parameter updates.
  void begin_step() noexcept { ++step_; }
  std::int64_t step_count() const noexcept { return step_; }

  /// p <- p (1 - lr wd); p <- p - lr m_hat / (sqrt(v_hat) + eps).
  void update(std::string_view name, Matrix& param, const Matrix& grad, double lr);

  /// Elements in the first-moment buffers (equal to the second-moment count).
  std::uint64_t state_elements() const noexcept;
  const AdamWConfig& config() const noexcept { return cfg_; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
  };
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, Moments, std::less<>> state_;
};

/// One optimizer step over every trainable parameter of `model`: dense
/// tensors are updated directly; column-tuned weights through paca_apply,
/// so only the selected columns are written. Throws ContractViolation when
/// a gradient is missing or mis-shaped.
void adamw_step(AdamW& opt, TransformerModel& model, const GradientSet& grads, double lr);

/// Sums micro-batch gradients and hands out their mean.
class GradAccumulator {
 public:
  explicit GradAccumulator(int n_accum);

  void add(const GradientSet& grads);
  int count() const noexcept { return count_; }
  int n_accum() const noexcept { return n_accum_; }
  bool ready() const noexcept { return count_ >= n_accum_; }

  /// Mean over the micro-batches actually added (so a partial group at
  /// epoch end is normalized by its own size); resets the buffer.
  GradientSet take_mean();

 private:
  int n_accum_;
  int count_ = 0;
  GradientSet sum_;
};

}  // namespace peftlab
