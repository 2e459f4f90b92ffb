// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Central finite-difference check of backward() against the mean
// cross-entropy loss of forward().

#include <cstdint>
#include <string>
#include <vector>

#include "peftlab/transformer.hpp"

namespace peftlab::workbench {

struct TensorCheck {
  std::string name;
  std::size_t entries = 0;
  double max_abs_error = 0;
  /// max |analytic - fd| / max(max |analytic|, max |fd|, 1e-8)
  double rel_error = 0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0;
  std::string worst_tensor;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Forward runs in training mode with this dropout seed for both the
  /// analytic and the perturbed evaluations, so LoRA dropout masks match.
  std::uint64_t dropout_seed = 0;
};

/// Checks every trainable parameter of `model`, which is restored bitwise
/// afterwards. Throws ContractViolation when nothing is trainable or a
/// gradient is missing.
GradCheckReport gradient_check(TransformerModel& model, const TokenBatch& tokens, const std::vector<int>& targets,
                               const GradCheckOptions& options = {});

}  // namespace peftlab::workbench
