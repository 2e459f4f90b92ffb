// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <fmt/format.h>

#include "peftlab/errors.hpp"

namespace peftlab {

namespace {

double sorted_percentile(const std::vector<double>& s, double q) {
  const double pos = q / 100.0 * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return s[lo] + (s[hi] - s[lo]) * frac;
}

std::vector<double> sorted_copy(std::span<const double> samples) {
  if (samples.empty()) throw ContractViolation("statistics of an empty sample");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  return s;
}

}  // namespace

double percentile(std::span<const double> samples, double q) {
  if (!(q >= 0 && q <= 100)) throw ContractViolation(fmt::format("percentile q = {} outside [0, 100]", q));
  return sorted_percentile(sorted_copy(samples), q);
}

double median(std::span<const double> samples) { return percentile(samples, 50); }

SampleStats summarize(std::span<const double> samples) {
  const std::vector<double> s = sorted_copy(samples);
  SampleStats out;
  out.count = s.size();
  out.median = sorted_percentile(s, 50);
  out.p5 = sorted_percentile(s, 5);
  out.p95 = sorted_percentile(s, 95);
  double sum = 0;
  for (double v : samples) sum += v;
  out.mean = sum / static_cast<double>(s.size());
  if (s.size() > 1) {
    double ss = 0;
    for (double v : samples) ss += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(ss / static_cast<double>(s.size() - 1));
  }
  return out;
}

}  // namespace peftlab
