// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "peftlab/workbench/run_config.hpp"

namespace peftlab::workbench {

struct CheckResult {
  std::string name;
  bool passed = false;
  double measured = 0;
  double tolerance = 0;
  std::string detail;
};

struct VerifyOptions {
  /// Negates projection weight gradients for the duration of the run.
  bool inject_backward_sign = false;
};

struct VerifyResult {
  std::vector<CheckResult> checks;
  bool passed = false;
  /// Pretty-printed JSON without timings; identical across runs.
  std::string json;
};

/// Oracle suite on fixed small models seeded from `config.seed`. Runs
/// single-threaded and restores the previous thread cap.
VerifyResult run_verify(const RunConfig& config, const VerifyOptions& options = {});

}  // namespace peftlab::workbench
