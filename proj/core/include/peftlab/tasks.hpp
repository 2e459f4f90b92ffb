// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic next-token tasks over integer tokens. Token 0 is the delimiter;
// content tokens are 1..vocab-1. Only answer positions carry targets.
//
//   copy        p1..pk D p1..p(k-1)   -> answers p1..pk      (seq = 2k)
//   reverse     p1..pk D pk..p2       -> answers pk..p1      (seq = 2k)
//   modular_sum p1..pk D              -> answer 1 + (sum p) mod (vocab-1)
//                                                             (seq = k + 1)

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "peftlab/transformer.hpp"

namespace peftlab {

enum class TaskKind { Copy, Reverse, ModularSum };

std::string_view task_name(TaskKind k) noexcept;
std::optional<TaskKind> parse_task_kind(std::string_view name) noexcept;

inline constexpr int kDelimiterToken = 0;

struct SyntheticTask {
  TaskKind kind = TaskKind::Copy;
  int vocab = 64;
  int seq_len = 16;  // full example length
  int train_size = 512;
  int val_size = 64;
  std::uint64_t seed = 0;

  /// Throws ConfigError when sizes are < 1, vocab < 3 or seq_len does not
  /// fit the task pattern.
  void validate() const;
  /// Number of content tokens k.
  int prefix_length() const noexcept;
};

struct Example {
  std::uint64_t id = 0;
  std::vector<int> input;   // seq_len tokens
  std::vector<int> target;  // seq_len entries, kIgnoreTarget off the answer span
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> val;
};

/// Deterministic per seed. Train and val draw from disjoint id ranges and
/// no val example repeats the content of a train example. Throws
/// ConfigError when the content space is too small for the requested sizes.
Dataset make_dataset(const SyntheticTask& task);

struct Batch {
  TokenBatch tokens;
  std::vector<int> targets;  // batch * seq, sequence-major
};

/// Stacks examples of equal length. Throws ContractViolation on an empty
/// span or ragged lengths.
Batch make_batch(std::span<const Example> examples);
Batch make_batch(std::span<const Example* const> examples);

}  // namespace peftlab
