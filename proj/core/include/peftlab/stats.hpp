// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>

namespace peftlab {

/// Linear-interpolation percentile, q in [0, 100]. Throws ContractViolation
/// on an empty sample or q out of range.
double percentile(std::span<const double> samples, double q);
double median(std::span<const double> samples);

struct SampleStats {
  std::size_t count = 0;
  double median = 0;
  double p5 = 0;
  double p95 = 0;
  double mean = 0;
  double stddev = 0;  // sample standard deviation; 0 for one sample
};

SampleStats summarize(std::span<const double> samples);

}  // namespace peftlab
