// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "peftlab/transformer.hpp"

namespace peftlab {

/// Target id that excludes a position from the loss.
inline constexpr int kIgnoreTarget = -1;

struct LossResult {
  double loss = 0;
  Matrix grad_logits;  // vocab x (batch * seq), d(mean loss)/d(logit)
  int counted = 0;     // positions that contributed
};

/// Mean token-level negative log-likelihood over positions whose target is
/// not kIgnoreTarget, with a max-shifted log-sum-exp. Throws
/// ContractViolation for target ids outside [0, vocab) other than the
/// ignore marker, or when no position is counted.
LossResult cross_entropy_loss(const Logits& logits, const std::vector<int>& targets);

}  // namespace peftlab
