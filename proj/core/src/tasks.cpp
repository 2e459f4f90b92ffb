// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "peftlab/errors.hpp"
#include "peftlab/loss.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

std::string_view task_name(TaskKind k) noexcept {
  switch (k) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::ModularSum: return "modular_sum";
  }
  return "copy";
}

std::optional<TaskKind> parse_task_kind(std::string_view name) noexcept {
  for (TaskKind k : {TaskKind::Copy, TaskKind::Reverse, TaskKind::ModularSum}) {
    if (task_name(k) == name) return k;
  }
  return std::nullopt;
}

int SyntheticTask::prefix_length() const noexcept {
  return kind == TaskKind::ModularSum ? seq_len - 1 : seq_len / 2;
}

void SyntheticTask::validate() const {
  if (train_size < 1 || val_size < 1) {
    throw ConfigError(fmt::format("task: train_size and val_size must be >= 1 (got {}, {})", train_size, val_size));
  }
  if (vocab < 3) throw ConfigError(fmt::format("task: vocab must be >= 3 (got {})", vocab));
  if (kind == TaskKind::ModularSum) {
    if (seq_len < 2) throw ConfigError(fmt::format("task: modular_sum needs seq_len >= 2 (got {})", seq_len));
  } else if (seq_len < 2 || seq_len % 2 != 0) {
    throw ConfigError(fmt::format("task: {} needs an even seq_len >= 2 (got {})", task_name(kind), seq_len));
  }
}

namespace {

Example build(const SyntheticTask& task, std::uint64_t id) {
  const int k = task.prefix_length();
  Rng rng(derive_seed(task.seed, id));
  std::vector<int> p(static_cast<std::size_t>(k));
  for (int& v : p) v = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(task.vocab - 1)));

  Example ex;
  ex.id = id;
  ex.input.assign(static_cast<std::size_t>(task.seq_len), kDelimiterToken);
  ex.target.assign(static_cast<std::size_t>(task.seq_len), kIgnoreTarget);
  for (int i = 0; i < k; ++i) ex.input[static_cast<std::size_t>(i)] = p[static_cast<std::size_t>(i)];

  if (task.kind == TaskKind::ModularSum) {
    long sum = 0;
    for (int v : p) sum += v;
    ex.target[static_cast<std::size_t>(k)] = 1 + static_cast<int>(sum % (task.vocab - 1));
    return ex;
  }
  // Answer sequence a1..ak; input after the delimiter holds a1..a(k-1).
  std::vector<int> a = p;
  if (task.kind == TaskKind::Reverse) std::reverse(a.begin(), a.end());
  for (int i = 0; i < k; ++i) {
    ex.target[static_cast<std::size_t>(k + i)] = a[static_cast<std::size_t>(i)];
    if (i + 1 < k) ex.input[static_cast<std::size_t>(k + 1 + i)] = a[static_cast<std::size_t>(i)];
  }
  return ex;
}

std::vector<int> content(const SyntheticTask& task, const Example& ex) {
  return {ex.input.begin(), ex.input.begin() + task.prefix_length()};
}

}  // namespace

Dataset make_dataset(const SyntheticTask& task) {
  task.validate();
  const double space = std::pow(static_cast<double>(task.vocab - 1), task.prefix_length());
  if (space < static_cast<double>(task.train_size) + static_cast<double>(task.val_size)) {
    throw ConfigError(fmt::format("task: {} distinct prefixes cannot hold {} train + {} val examples", space,
                                  task.train_size, task.val_size));
  }
  // Train ids count up from 0, val ids from 2^62; val skips train content.
  constexpr std::uint64_t kValBase = std::uint64_t{1} << 62;
  const std::uint64_t max_attempts = 100 * static_cast<std::uint64_t>(task.train_size + task.val_size);

  Dataset ds;
  std::set<std::vector<int>> train_content;
  std::uint64_t id = 0;
  while (ds.train.size() < static_cast<std::size_t>(task.train_size)) {
    Example ex = build(task, id++);
    train_content.insert(content(task, ex));
    ds.train.push_back(std::move(ex));
  }
  std::uint64_t attempts = 0;
  for (std::uint64_t j = 0; ds.val.size() < static_cast<std::size_t>(task.val_size); ++j) {
    if (++attempts > max_attempts) {
      throw ConfigError("task: could not draw enough validation examples disjoint from train");
    }
    Example ex = build(task, kValBase + j);
    if (train_content.contains(content(task, ex))) continue;
    ds.val.push_back(std::move(ex));
  }
  return ds;
}

Batch make_batch(std::span<const Example* const> examples) {
  if (examples.empty()) throw ContractViolation("make_batch: no examples");
  const std::size_t seq = examples.front()->input.size();
  Batch b;
  b.tokens.batch = static_cast<int>(examples.size());
  b.tokens.seq = static_cast<int>(seq);
  b.tokens.ids.reserve(examples.size() * seq);
  b.targets.reserve(examples.size() * seq);
  for (const Example* ex : examples) {
    if (ex->input.size() != seq || ex->target.size() != seq) {
      throw ContractViolation("make_batch: examples have different lengths");
    }
    b.tokens.ids.insert(b.tokens.ids.end(), ex->input.begin(), ex->input.end());
    b.targets.insert(b.targets.end(), ex->target.begin(), ex->target.end());
  }
  return b;
}

Batch make_batch(std::span<const Example> examples) {
  std::vector<const Example*> ptrs;
  ptrs.reserve(examples.size());
  for (const Example& e : examples) ptrs.push_back(&e);
  return make_batch(std::span<const Example* const>(ptrs));
}

}  // namespace peftlab
