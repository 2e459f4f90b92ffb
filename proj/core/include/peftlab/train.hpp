// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "peftlab/optim.hpp"
#include "peftlab/strategy.hpp"
#include "peftlab/tasks.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

struct TrainHyper {
  int batch = 8;
  int grad_accum = 4;
  int epochs = 1;
  /// Effective (optimizer) steps; when set, epochs repeat until reached.
  std::optional<std::int64_t> max_steps;
  double lr = 3e-4;
  /// Learning rate for PaCA and SelectivePaCA.
  double paca_lr = 3e-4;
  std::int64_t warmup_steps = 100;
  AdamWConfig adamw;
  int eval_batch = 64;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;  // argmax hits over answer positions
  int positions = 0;
};

using LogitsFn = std::function<Logits(const TokenBatch&)>;

/// Mean loss and accuracy over the answer positions of `val`. Throws
/// ContractViolation on an empty set.
EvalResult evaluate(const LogitsFn& predict, std::span<const Example> val, int eval_batch = 64);
EvalResult evaluate(const TransformerModel& model, std::span<const Example> val, int eval_batch = 64);

struct TrainReport {
  std::string strategy;
  std::string variant;
  std::string task;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::uint64_t trainable_params = 0;
  std::int64_t steps = 0;         // optimizer steps
  std::int64_t micro_batches = 0;
  double train_seconds = 0;       // wall clock of the optimization loop
  double initial_val_loss = 0;
  double final_val_loss = 0;
  double initial_val_accuracy = 0;
  double final_val_accuracy = 0;
  double last_train_loss = 0;
};

/// Applies `strategy` to `model` and trains it on `data.train`. Parameters
/// the strategy leaves frozen stay bitwise unchanged. Throws
/// DivergenceError when a loss or gradient becomes non-finite.
TrainReport train(TransformerModel& model, const StrategyConfig& strategy, const Dataset& data,
                  const TrainHyper& hyper, std::string_view task_label = "");

/// Optimizer steps `train` will take.
std::int64_t planned_steps(std::size_t train_size, const TrainHyper& hyper);

/// Five rows: no tuning, LoRA(r), PaCA and top-L/2, top-3L/4 selective PaCA
/// with widths matched to LoRA's budget.
std::vector<StrategyConfig> default_suite(const ModelConfig& cfg, int lora_rank = 8, std::uint64_t seed = 0,
                                          double lora_alpha = 32, double lora_dropout = 0.1);

}  // namespace peftlab
