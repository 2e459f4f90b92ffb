// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// JSON run configuration shared by every subcommand.
//
// {
//   "seed": 0,
//   "output_dir": "peftlab-out",
//   "model":    {"layers", "d_model", "n_heads", "d_ff", "vocab", "seq_len", "norm_eps", "rope_base"},
//   "strategy": {"variant": "full"|"lora"|"paca"|"selective_paca", "rank", "alpha", "dropout",
//                "mask_width", "k_layers", "match_lora_rank", "target_modules": [...], "seed", "label"},
//   "strategies": [ <strategy>, ... ],
//   "optim":    {"lr", "paca_lr", "warmup_steps", "epochs", "max_steps", "grad_accum", "batch",
//                "weight_decay", "betas": [b1, b2], "eps", "eval_batch"},
//   "bench":    {"batch", "seq", "warmup_iters", "timed_iters", "memory_budget_mb"},
//   "task":     {"kind": "copy"|"reverse"|"modular_sum", "seq_len", "train_size", "val_size", "seed"},
//   "device":   {"throughput", "launch_overhead"}
// }
//
// Every section and key is optional; unknown keys are errors. "strategy",
// when present, is prepended to "strategies"; with neither, the list is
// full fine-tuning followed by the five-row comparison suite.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/bench.hpp"
#include "peftlab/cost_model.hpp"
#include "peftlab/model_config.hpp"
#include "peftlab/strategy.hpp"
#include "peftlab/tasks.hpp"
#include "peftlab/train.hpp"

namespace peftlab::workbench {

struct BenchSection {
  int batch = 4;
  int seq = 32;
  BenchOptions options;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "peftlab-out";
  ModelConfig model{4, 64, 4, 172, 64, 32};
  std::vector<StrategyConfig> strategies;
  TrainHyper optim;
  BenchSection bench;
  SyntheticTask task;
  DeviceProfile device{1e9, 5e-6};
};

/// Parses and validates `text`. Throws ConfigError listing every
/// field-level problem, one per line, as "<json path>: <message>".
RunConfig parse_run_config(std::string_view text, std::optional<std::uint64_t> seed_override = std::nullopt);
RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt);

/// The configuration used when no --config is given.
RunConfig default_run_config(std::optional<std::uint64_t> seed_override = std::nullopt);

}  // namespace peftlab::workbench
