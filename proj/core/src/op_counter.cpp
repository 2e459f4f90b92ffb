// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/op_counter.hpp"

namespace peftlab {

namespace {
thread_local OpCounter* t_active = nullptr;
}  // namespace

void OpCounter::record(std::string_view tag, OpKind kind, std::uint64_t flops) {
  const OpTally one{flops, 1};
  auto it = tags_.find(tag);
  if (it == tags_.end()) it = tags_.emplace(std::string(tag), TagTally{}).first;
  if (kind == OpKind::Matmul) {
    matmul_ += one;
    it->second.matmul += one;
  } else {
    elementwise_ += one;
    it->second.elementwise += one;
  }
  if (logging_) log_.push_back(OpRecord{std::string(tag), kind, flops});
}

OpTally OpCounter::matmul_where(const std::function<bool(std::string_view)>& keep) const {
  OpTally t;
  for (const auto& [tag, tally] : tags_) {
    if (keep(tag)) t += tally.matmul;
  }
  return t;
}

void OpCounter::reset() {
  matmul_ = {};
  elementwise_ = {};
  tags_.clear();
  log_.clear();
}

CountingScope::CountingScope(OpCounter& counter) noexcept : previous_(t_active) {
  t_active = &counter;
}

CountingScope::~CountingScope() { t_active = previous_; }

OpCounter* active_counter() noexcept { return t_active; }

void record_op(std::string_view tag, OpKind kind, std::uint64_t flops) {
  if (t_active != nullptr) t_active->record(tag, kind, flops);
}

}  // namespace peftlab
