// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/model_config.hpp"
#include "peftlab/stats.hpp"
#include "peftlab/strategy.hpp"

namespace peftlab {

struct PhaseStats {
  double median_ms = 0;
  double p5_ms = 0;
  double p95_ms = 0;
  double mean_ms = 0;
  double stddev_ms = 0;
};

PhaseStats to_phase_stats(const SampleStats& s_seconds);

struct BenchRecord {
  std::string strategy;
  std::string config_hash;
  int d_model = 0;
  int layers = 0;
  int batch = 0;
  int seq = 0;
  int iterations = 0;
  int warmup_iterations = 0;
  PhaseStats fwd;
  PhaseStats bwd;
  // Matmul-only projection counts of one forward and one backward.
  std::uint64_t fwd_flops = 0;
  std::uint64_t bwd_flops = 0;
  std::uint64_t fwd_kernels = 0;
  std::uint64_t bwd_kernels = 0;
  std::uint64_t trainable_params = 0;
};

struct BenchOptions {
  int warmup_iters = 10;
  int timed_iters = 20;
  std::uint64_t seed = 0;
  std::uint64_t memory_budget_bytes = std::uint64_t{2} << 30;
};

/// Upper bound on the bytes one forward/backward pair holds live.
std::uint64_t bench_memory_bytes(const ModelConfig& cfg, const StrategyConfig& strategy, int batch, int seq);

/// Times `timed_iters` forward and backward passes after `warmup_iters`
/// untimed ones on fixed random tokens and output gradients. Throws
/// ContractViolation for timed_iters < 5 or when another bench_strategy is
/// running in this process, and ResourceError when bench_memory_bytes
/// exceeds the budget.
BenchRecord bench_strategy(const ModelConfig& cfg, const StrategyConfig& strategy, int batch, int seq,
                           const BenchOptions& options = {});

inline constexpr std::string_view kBenchCsvHeader =
    "strategy,d_model,layers,batch,seq,fwd_median_ms,fwd_p5_ms,fwd_p95_ms,bwd_median_ms,bwd_p5_ms,bwd_p95_ms,"
    "fwd_flops,bwd_flops,fwd_kernels,bwd_kernels,trainable_params";

/// Header plus one line per record; times with three decimals.
std::string bench_csv(std::span<const BenchRecord> records);
/// Throws SchemaError on a header mismatch or malformed row.
std::vector<BenchRecord> parse_bench_csv(std::string_view text);

struct CompareReport {
  std::string csv;
  std::string table;
};

/// Needs >= 2 records sharing one config hash (ConfigError otherwise).
/// The baseline is the record named `baseline`, or the first record.
/// Speedup is baseline (fwd + bwd) median over the row's; rank orders rows
/// by ascending fwd + bwd median.
CompareReport compare_report(std::span<const BenchRecord> records, std::string_view baseline = "full");

}  // namespace peftlab
