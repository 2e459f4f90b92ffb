// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/loss.hpp"

#include <cmath>

#include <fmt/format.h>

#include "peftlab/errors.hpp"
#include "peftlab/op_counter.hpp"

namespace peftlab {

LossResult cross_entropy_loss(const Logits& logits, const std::vector<int>& targets) {
  const Matrix& z = logits.values;
  const std::size_t cols = z.cols();
  const std::size_t vocab = z.rows();
  if (targets.size() != cols) {
    throw ContractViolation(
        fmt::format("cross_entropy_loss: {} targets for {} positions", targets.size(), cols));
  }
  int counted = 0;
  for (int t : targets) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ContractViolation(fmt::format("cross_entropy_loss: target id {} outside vocab {}", t, vocab));
    }
    ++counted;
  }
  if (counted == 0) throw ContractViolation("cross_entropy_loss: every target is ignored");

  LossResult res;
  res.counted = counted;
  res.grad_logits = Matrix(vocab, cols);
  const double inv_n = 1.0 / counted;
  double total = 0;
  for (std::size_t c = 0; c < cols; ++c) {
    if (targets[c] == kIgnoreTarget) continue;
    double mx = -INFINITY;
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, static_cast<double>(z(v, c)));
    double sum = 0;
    for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(static_cast<double>(z(v, c)) - mx);
    const double lse = mx + std::log(sum);
    const auto tgt = static_cast<std::size_t>(targets[c]);
    total += lse - static_cast<double>(z(tgt, c));
    for (std::size_t v = 0; v < vocab; ++v) {
      const double p = std::exp(static_cast<double>(z(v, c)) - lse);
      res.grad_logits(v, c) = static_cast<real_t>((p - (v == tgt ? 1.0 : 0.0)) * inv_n);
    }
  }
  res.loss = total * inv_n;
  record_op("loss/fwd", OpKind::Elementwise, 4 * z.size());
  return res;
}

}  // namespace peftlab
