// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/cost_model.hpp"

#include <cmath>

#include <fmt/format.h>

#include "peftlab/errors.hpp"

namespace peftlab {

namespace {

std::uint64_t mm(std::int64_t m, std::int64_t k, std::int64_t n) {
  return 2 * static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>(n);
}

void check_dims(const LayerDims& d) {
  if (d.d_in < 1 || d.d_out < 1 || d.tokens < 1) {
    throw ContractViolation(fmt::format("layer dims must be >= 1 (d_in {}, d_out {}, tokens {})", d.d_in,
                                        d.d_out, d.tokens));
  }
}

}  // namespace

CostEstimate& CostEstimate::operator+=(const CostEstimate& o) noexcept {
  fwd_flops += o.fwd_flops;
  bwd_flops += o.bwd_flops;
  fwd_kernels += o.fwd_kernels;
  bwd_kernels += o.bwd_kernels;
  trainable_params += o.trainable_params;
  predicted_fwd_seconds.reset();
  predicted_bwd_seconds.reset();
  return *this;
}

CostEstimate cost_frozen(const LayerDims& d, bool input_grad) {
  check_dims(d);
  CostEstimate e;
  e.fwd_flops = mm(d.d_out, d.d_in, d.tokens);
  e.fwd_kernels = 1;
  if (input_grad) {
    e.bwd_flops = mm(d.d_in, d.d_out, d.tokens);
    e.bwd_kernels = 1;
  }
  return e;
}

CostEstimate cost_fullft(const LayerDims& d, bool input_grad) {
  CostEstimate e = cost_frozen(d, input_grad);
  e.bwd_flops += mm(d.d_out, d.tokens, d.d_in);
  e.bwd_kernels += 1;
  e.trainable_params = static_cast<std::uint64_t>(d.d_out * d.d_in);
  return e;
}

CostEstimate cost_lora(const LayerDims& d, std::int64_t r, bool input_grad) {
  check_dims(d);
  if (r < 1) throw ContractViolation(fmt::format("cost_lora: rank must be >= 1 (got {})", r));
  const std::int64_t n = d.tokens;
  CostEstimate e;
  e.fwd_flops = mm(d.d_out, d.d_in, n) + mm(r, d.d_in, n) + mm(d.d_out, r, n);
  e.fwd_kernels = 3;
  // B^T dY, dB = dY X_mid^T, dA = dX_mid X^T
  e.bwd_flops = mm(r, d.d_out, n) + mm(d.d_out, n, r) + mm(r, n, d.d_in);
  e.bwd_kernels = 3;
  if (input_grad) {
    // W^T dY, A^T dX_mid
    e.bwd_flops += mm(d.d_in, d.d_out, n) + mm(d.d_in, r, n);
    e.bwd_kernels += 2;
  }
  e.trainable_params = static_cast<std::uint64_t>(r * (d.d_out + d.d_in));
  return e;
}

CostEstimate cost_paca(const LayerDims& d, std::int64_t m, bool input_grad) {
  check_dims(d);
  if (m < 0 || m > d.d_in) {
    throw ContractViolation(fmt::format("cost_paca: mask width {} outside [0, d_in = {}]", m, d.d_in));
  }
  CostEstimate e = cost_frozen(d, input_grad);
  if (m > 0) {
    e.bwd_flops += mm(d.d_out, d.tokens, m);
    e.bwd_kernels += 1;
  }
  e.trainable_params = static_cast<std::uint64_t>(m * d.d_out);
  return e;
}

CostEstimate cost_selective(const ModelConfig& cfg, const StrategyConfig& s, std::int64_t tokens) {
  cfg.validate();
  s.validate(cfg);
  const bool full = std::holds_alternative<FullFT>(s.variant);
  const int first = first_tuned_block(cfg, s);
  const bool has_targets = !s.targets.empty();

  auto tuned = [&](int block, Target t) { return block >= first && s.targets.contains(t); };
  // Trainable parameters strictly below the input of `block`: FullFT always
  // (embedding), otherwise any tuned block underneath.
  auto trainable_below = [&](int block) { return full || (has_targets && block > first); };
  // Norm gains train only under FullFT.
  const bool norms = full;

  CostEstimate total;
  for (int i = 0; i < cfg.layers; ++i) {
    const bool runs_backward = trainable_below(i + 1) || (has_targets && i >= first);
    const bool below = trainable_below(i);
    const bool qkv_in = below || norms;
    const bool o_in = qkv_in || tuned(i, Target::Q) || tuned(i, Target::K) || tuned(i, Target::V);
    const bool mlp_in = o_in || tuned(i, Target::O) || norms;
    const bool down_in = mlp_in || tuned(i, Target::Up) || tuned(i, Target::Gate);

    for (Target t : kAllTargets) {
      const MatrixShape sh = target_shape(cfg, t);
      const LayerDims dims{sh.d_in, sh.d_out, tokens};
      bool input_grad = false;
      switch (t) {
        case Target::Q:
        case Target::K:
        case Target::V: input_grad = qkv_in; break;
        case Target::O: input_grad = o_in; break;
        case Target::Up:
        case Target::Gate: input_grad = mlp_in; break;
        case Target::Down: input_grad = down_in; break;
      }
      CostEstimate e;
      if (!tuned(i, t)) {
        e = cost_frozen(dims, input_grad);
      } else if (full) {
        e = cost_fullft(dims, input_grad);
      } else if (const auto* l = std::get_if<LoraSpec>(&s.variant)) {
        e = cost_lora(dims, l->rank, input_grad);
      } else {
        e = cost_paca(dims, mask_width_for(cfg, s, t), input_grad);
      }
      if (!runs_backward) {
        e.bwd_flops = 0;
        e.bwd_kernels = 0;
      }
      total += e;
    }
  }
  total.trainable_params = trainable_params(cfg, s);
  return total;
}

PhaseTimes predict_time(const CostEstimate& est, const DeviceProfile& p) {
  if (!(p.throughput > 0) || !(p.launch_overhead >= 0)) {
    throw ContractViolation("device profile needs throughput > 0 and launch_overhead >= 0");
  }
  return {static_cast<double>(est.fwd_kernels) * p.launch_overhead + static_cast<double>(est.fwd_flops) / p.throughput,
          static_cast<double>(est.bwd_kernels) * p.launch_overhead + static_cast<double>(est.bwd_flops) / p.throughput};
}

CostEstimate with_prediction(CostEstimate est, const DeviceProfile& profile) {
  const PhaseTimes t = predict_time(est, profile);
  est.predicted_fwd_seconds = t.fwd_seconds;
  est.predicted_bwd_seconds = t.bwd_seconds;
  return est;
}

CalibrationPoint forward_point(const CostEstimate& est, double seconds) {
  return {est.fwd_flops, est.fwd_kernels, seconds};
}

CalibrationPoint backward_point(const CostEstimate& est, double seconds) {
  return {est.bwd_flops, est.bwd_kernels, seconds};
}

DeviceProfile calibrate_profile(std::span<const CalibrationPoint> pts) {
  if (pts.size() < 2) {
    throw ContractViolation(fmt::format("calibrate_profile: need at least 2 points, got {}", pts.size()));
  }
  // Columns k (kernels) and f (flops), normalized for conditioning.
  double kk = 0, ff = 0;
  for (const auto& p : pts) {
    kk += static_cast<double>(p.kernels) * static_cast<double>(p.kernels);
    ff += static_cast<double>(p.flops) * static_cast<double>(p.flops);
  }
  const double nk = std::sqrt(kk);
  const double nf = std::sqrt(ff);
  if (nk == 0 || nf == 0) {
    throw ContractViolation("calibrate_profile: singular system (all kernel counts or all FLOP counts are zero)");
  }
  double a11 = 0, a12 = 0, a22 = 0, b1 = 0, b2 = 0;
  for (const auto& p : pts) {
    const double k = static_cast<double>(p.kernels) / nk;
    const double f = static_cast<double>(p.flops) / nf;
    a11 += k * k;
    a12 += k * f;
    a22 += f * f;
    b1 += k * p.seconds;
    b2 += f * p.seconds;
  }
  const double det = a11 * a22 - a12 * a12;
  if (det < 1e-12) {
    std::string desc;
    for (const auto& p : pts) desc += fmt::format(" ({} kernels, {} flops)", p.kernels, p.flops);
    throw ContractViolation("calibrate_profile: singular system, kernel/FLOP ratios are identical:" + desc);
  }
  double overhead = (b1 * a22 - b2 * a12) / det;    // scaled
  double inv_tp = (a11 * b2 - a12 * b1) / det;       // scaled
  if (inv_tp < 0) {
    inv_tp = 0;
    overhead = b1 / a11;
  }
  if (overhead < 0) {
    overhead = 0;
    inv_tp = b2 / a22;
  }
  if (!(inv_tp > 0)) throw ContractViolation("calibrate_profile: fitted throughput is not positive");
  return DeviceProfile{nf / inv_tp, overhead / nk};
}

std::int64_t lora_break_even_rank(std::int64_t d_in, std::int64_t d_out) {
  if (d_in < 1 || d_out < 1) throw ContractViolation("lora_break_even_rank: dims must be >= 1");
  const std::int64_t num = d_in * d_out;
  const std::int64_t den = 3 * (d_in + d_out);
  return (num - 1) / den;
}

std::optional<double> launch_overhead_threshold(const CostEstimate& candidate, const CostEstimate& baseline,
                                                double throughput) {
  const auto kc = static_cast<double>(candidate.total_kernels());
  const auto kb = static_cast<double>(baseline.total_kernels());
  if (kc <= kb) return std::nullopt;
  const double df = static_cast<double>(baseline.total_flops()) - static_cast<double>(candidate.total_flops());
  return std::max(0.0, df / (throughput * (kc - kb)));
}

}  // namespace peftlab
