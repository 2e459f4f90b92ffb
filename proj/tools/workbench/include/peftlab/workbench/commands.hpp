// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "peftlab/workbench/run_config.hpp"
#include "peftlab/workbench/verify.hpp"

namespace peftlab::workbench {

enum ExitCode : int {
  kExitOk = 0,
  kExitVerifyFailed = 1,
  kExitConfig = 2,
  kExitResource = 3,
  kExitDivergence = 4,
  kExitSchema = 5,
};

inline constexpr int kReportSchemaVersion = 1;

/// JSON cost report on `out`; also written to <output_dir>/estimate.json.
int cmd_estimate(const RunConfig& config, std::ostream& out);
/// Writes <output_dir>/bench.csv; prints the comparison table.
int cmd_bench(const RunConfig& config, std::ostream& out);
/// Writes <output_dir>/train_report.json and one checkpoint per strategy
/// under <output_dir>/checkpoints/.
int cmd_train(const RunConfig& config, std::ostream& out);
/// Prints the verify JSON; writes <output_dir>/verify.json.
int cmd_verify(const RunConfig& config, const VerifyOptions& options, std::ostream& out, std::ostream& err);
/// Markdown comparison of bench CSVs and train reports.
int cmd_report(const std::vector<std::string>& inputs, std::ostream& out);

/// Full command line: `peftlab <subcommand> [--config PATH] [--seed N]
/// [--out DIR]`. Maps library errors onto ExitCode.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace peftlab::workbench
