// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/optim.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "peftlab/errors.hpp"

namespace peftlab {

double lr_at(const Schedule& s, std::int64_t step) {
  if (s.warmup_steps < 0 || s.warmup_steps > s.total_steps) {
    throw ContractViolation(fmt::format("schedule: warmup {} must lie in [0, total {}]", s.warmup_steps,
                                        s.total_steps));
  }
  if (step < 0 || step > s.total_steps) {
    throw ContractViolation(fmt::format("lr_at: step {} outside [0, {}]", step, s.total_steps));
  }
  if (step < s.warmup_steps) {
    return s.base_lr * static_cast<double>(step + 1) / static_cast<double>(s.warmup_steps);
  }
  const std::int64_t span = s.total_steps - s.warmup_steps;
  const double progress = span == 0 ? 1.0 : static_cast<double>(step - s.warmup_steps) / static_cast<double>(span);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::update(std::string_view name, Matrix& param, const Matrix& grad, double lr) {
  if (!param.same_shape(grad)) {
    throw ContractViolation(fmt::format("adamw: gradient {} does not match parameter {} ({})",
                                        grad.shape_string(), param.shape_string(), name));
  }
  if (step_ < 1) throw ContractViolation("adamw: update() before begin_step()");
  auto it = state_.find(name);
  if (it == state_.end()) {
    it = state_.emplace(std::string(name), Moments{Matrix(param.rows(), param.cols()),
                                                   Matrix(param.rows(), param.cols())}).first;
  } else if (!it->second.m.same_shape(param)) {
    throw ContractViolation(fmt::format("adamw: parameter {} changed shape", name));
  }
  auto p = param.values();
  auto g = grad.values();
  auto m = it->second.m.values();
  auto v = it->second.v.values();
  const double b1 = cfg_.beta1;
  const double b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    m[i] = static_cast<real_t>(b1 * m[i] + (1.0 - b1) * gi);
    v[i] = static_cast<real_t>(b2 * v[i] + (1.0 - b2) * gi * gi);
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] = static_cast<real_t>(p[i] * decay - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
  }
}

std::uint64_t AdamW::state_elements() const noexcept {
  std::uint64_t n = 0;
  for (const auto& [name, mom] : state_) n += mom.m.size();
  return n;
}

void adamw_step(AdamW& opt, TransformerModel& model, const GradientSet& grads, double lr) {
  opt.begin_step();
  for (ParameterRef& p : trainable_parameters(model)) {
    auto it = grads.find(p.name);
    if (it == grads.end()) throw ContractViolation(fmt::format("adamw_step: no gradient for {}", p.name));
    if (p.columns != nullptr) {
      paca_apply(*p.tensor, *p.columns, it->second,
                 [&](Matrix& cols, const Matrix& g) { opt.update(p.name, cols, g, lr); });
    } else {
      opt.update(p.name, *p.tensor, it->second, lr);
    }
  }
}

GradAccumulator::GradAccumulator(int n_accum) : n_accum_(n_accum) {
  if (n_accum < 1) throw ContractViolation(fmt::format("grad_accum must be >= 1 (got {})", n_accum));
}

void GradAccumulator::add(const GradientSet& grads) {
  if (count_ == 0) {
    sum_ = grads;
  } else {
    if (grads.size() != sum_.size()) throw ContractViolation("GradAccumulator: gradient sets differ");
    for (const auto& [name, g] : grads) {
      auto it = sum_.find(name);
      if (it == sum_.end() || !it->second.same_shape(g)) {
        throw ContractViolation(fmt::format("GradAccumulator: unexpected gradient {}", name));
      }
      auto s = it->second.values();
      auto gv = g.values();
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += gv[i];
    }
  }
  ++count_;
}

GradientSet GradAccumulator::take_mean() {
  if (count_ == 0) throw ContractViolation("GradAccumulator: nothing accumulated");
  GradientSet out = std::move(sum_);
  if (count_ > 1) {
    const real_t inv = static_cast<real_t>(1) / static_cast<real_t>(count_);
    for (auto& [name, g] : out) {
      for (real_t& v : g.values()) v *= inv;
    }
  }
  sum_.clear();
  count_ = 0;
  return out;
}

}  // namespace peftlab
