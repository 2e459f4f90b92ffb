// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/workbench/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "peftlab/errors.hpp"
#include "peftlab/loss.hpp"

namespace peftlab::workbench {

GradCheckReport gradient_check(TransformerModel& model, const TokenBatch& tokens, const std::vector<int>& targets,
                               const GradCheckOptions& o) {
  ForwardOptions fo;
  fo.training = true;
  fo.dropout_seed = o.dropout_seed;
  auto loss_of = [&] { return cross_entropy_loss(forward(model, tokens, fo).logits, targets).loss; };

  ForwardResult fr = forward(model, tokens, fo);
  const LossResult lr = cross_entropy_loss(fr.logits, targets);
  const GradientSet grads = backward(model, fr.cache, lr.grad_logits);

  std::vector<ParameterRef> params = trainable_parameters(model);
  if (params.empty()) throw ContractViolation("gradient_check: model has no trainable parameters");

  GradCheckReport rep;
  for (ParameterRef& p : params) {
    const auto it = grads.find(p.name);
    if (it == grads.end()) throw ContractViolation("gradient_check: backward produced no gradient for " + p.name);
    const Matrix& g = it->second;
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw ContractViolation("gradient_check: gradient shape mismatch for " + p.name);
    }
    double max_diff = 0, max_a = 0, max_fd = 0;
    bool finite = true;
    for (std::size_t r = 0; r < p.rows(); ++r) {
      for (std::size_t c = 0; c < p.cols(); ++c) {
        real_t& w = p.at(r, c);
        const real_t saved = w;
        w = static_cast<real_t>(saved + o.step);
        const double up = loss_of();
        w = static_cast<real_t>(saved - o.step);
        const double down = loss_of();
        w = saved;
        const double fd = (up - down) / (2 * o.step);
        const double a = g(r, c);
        finite = finite && std::isfinite(a) && std::isfinite(fd);
        max_diff = std::max(max_diff, std::abs(a - fd));
        max_a = std::max(max_a, std::abs(a));
        max_fd = std::max(max_fd, std::abs(fd));
      }
    }
    TensorCheck tc{p.name, p.element_count(), max_diff, max_diff / std::max({max_a, max_fd, 1e-8})};
    if (!finite || !std::isfinite(tc.rel_error)) tc.rel_error = std::numeric_limits<double>::infinity();
    if (tc.rel_error >= rep.max_rel_error) {
      rep.max_rel_error = tc.rel_error;
      rep.worst_tensor = tc.name;
    }
    rep.tensors.push_back(std::move(tc));
  }
  return rep;
}

}  // namespace peftlab::workbench
