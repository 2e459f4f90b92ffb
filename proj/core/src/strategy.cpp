// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/strategy.hpp"

#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "peftlab/errors.hpp"

namespace peftlab {

namespace {
template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
}  // namespace

std::string_view StrategyConfig::variant_name() const noexcept {
  return std::visit(overloaded{[](const FullFT&) { return std::string_view("full"); },
                               [](const LoraSpec&) { return std::string_view("lora"); },
                               [](const PacaSpec&) { return std::string_view("paca"); },
                               [](const SelectivePacaSpec&) { return std::string_view("selective_paca"); }},
                    variant);
}

std::string StrategyConfig::name() const {
  if (!label.empty()) return label;
  return std::visit(
      overloaded{[](const FullFT&) { return std::string("full"); },
                 [](const LoraSpec& l) { return fmt::format("lora_r{}", l.rank); },
                 [](const PacaSpec& p) {
                   return p.match_lora_rank ? fmt::format("paca_match_r{}", *p.match_lora_rank)
                                            : fmt::format("paca_m{}", p.mask_width);
                 },
                 [](const SelectivePacaSpec& p) {
                   return p.match_lora_rank
                              ? fmt::format("selective_paca_k{}_match_r{}", p.k_layers, *p.match_lora_rank)
                              : fmt::format("selective_paca_k{}_m{}", p.k_layers, p.mask_width);
                 }},
      variant);
}

int first_tuned_block(const ModelConfig& cfg, const StrategyConfig& s) {
  if (const auto* sel = std::get_if<SelectivePacaSpec>(&s.variant)) return cfg.layers - sel->k_layers;
  return s.targets.empty() && !std::holds_alternative<FullFT>(s.variant) ? cfg.layers : 0;
}

int mask_width_for(const ModelConfig& cfg, const StrategyConfig& s, Target t) {
  const MatrixShape shape = target_shape(cfg, t);
  int width = 0;
  std::optional<int> match;
  int k_layers = cfg.layers;
  if (const auto* p = std::get_if<PacaSpec>(&s.variant)) {
    width = p->mask_width;
    match = p->match_lora_rank;
  } else if (const auto* sp = std::get_if<SelectivePacaSpec>(&s.variant)) {
    width = sp->mask_width;
    match = sp->match_lora_rank;
    k_layers = sp->k_layers;
  } else {
    throw ContractViolation("mask_width_for: strategy is not column-based");
  }
  if (match && k_layers > 0) {
    width = match_paca_width(cfg.layers, k_layers, *match, shape.d_in, shape.d_out);
  }
  return width;
}

void StrategyConfig::validate(const ModelConfig& cfg) const {
  std::visit(
      overloaded{
          [](const FullFT&) {},
          [](const LoraSpec& l) {
            if (l.rank < 1) throw ConfigError(fmt::format("strategy.rank: must be >= 1 (got {})", l.rank));
            if (!(l.dropout >= 0 && l.dropout < 1)) {
              throw ConfigError(fmt::format("strategy.dropout: must be in [0, 1) (got {})", l.dropout));
            }
            if (!std::isfinite(l.alpha)) throw ConfigError("strategy.alpha: must be finite");
          },
          [&](const PacaSpec& p) {
            if (p.mask_width < 0) throw ConfigError("strategy.mask_width: must be >= 0");
            if (p.match_lora_rank && *p.match_lora_rank < 1) {
              throw ConfigError("strategy.match_lora_rank: must be >= 1");
            }
          },
          [&](const SelectivePacaSpec& p) {
            if (p.k_layers < 0 || p.k_layers > cfg.layers) {
              throw ConfigError(fmt::format("strategy.k_layers: must be in [0, {}] (got {})", cfg.layers, p.k_layers));
            }
            if (p.mask_width < 0) throw ConfigError("strategy.mask_width: must be >= 0");
            if (p.match_lora_rank && *p.match_lora_rank < 1) {
              throw ConfigError("strategy.match_lora_rank: must be >= 1");
            }
          }},
      variant);
  if (std::holds_alternative<PacaSpec>(variant) || std::holds_alternative<SelectivePacaSpec>(variant)) {
    for (Target t : kAllTargets) {
      if (!targets.contains(t)) continue;
      const int m = mask_width_for(cfg, *this, t);
      const int d_in = target_shape(cfg, t).d_in;
      if (m > d_in) {
        throw ConfigError(fmt::format("strategy.mask_width: width {} exceeds d_in {} of target {}", m,
                                      d_in, target_name(t)));
      }
    }
  }
}

void apply_strategy(TransformerModel& model, const StrategyConfig& s) {
  const ModelConfig& cfg = model.config;
  s.validate(cfg);
  model.clear_adapters();
  const int first = first_tuned_block(cfg, s);
  if (std::holds_alternative<FullFT>(s.variant)) {
    model.embed_trainable = model.head_trainable = model.final_norm_trainable = true;
  }
  for (int i = 0; i < cfg.layers; ++i) {
    Block& blk = model.blocks[static_cast<std::size_t>(i)];
    if (std::holds_alternative<FullFT>(s.variant)) blk.norms_trainable = true;
    if (i < first) continue;
    for (Target t : kAllTargets) {
      if (!s.targets.contains(t)) continue;
      LinearSlot& slot = blk.slot(t);
      const MatrixShape shape = target_shape(cfg, t);
      const std::uint64_t sub = derive_seed(s.seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(t));
      if (std::holds_alternative<FullFT>(s.variant)) {
        slot.mode = Trainability::Dense;
      } else if (const auto* l = std::get_if<LoraSpec>(&s.variant)) {
        Rng rng(sub);
        slot.lora = LoraAdapter::init(rng, shape.d_out, shape.d_in, l->rank, static_cast<real_t>(l->alpha),
                                      static_cast<real_t>(l->dropout));
        slot.mode = Trainability::Adapter;
      } else {
        const int m = mask_width_for(cfg, s, t);
        slot.columns = select_columns(sub, static_cast<std::size_t>(shape.d_in), static_cast<std::size_t>(m));
        slot.mode = Trainability::Columns;
      }
    }
  }
}

int match_paca_width(int layers, int k_layers, int lora_rank, int d_in, int d_out) {
  if (k_layers < 1 || k_layers > layers) {
    throw ContractViolation(fmt::format("match_paca_width: K = {} must satisfy 1 <= K <= L = {}", k_layers, layers));
  }
  if (lora_rank < 1 || d_in < 1 || d_out < 1) {
    throw ContractViolation("match_paca_width: rank and dimensions must be >= 1");
  }
  const std::int64_t num = std::int64_t{layers} * lora_rank * (std::int64_t{d_in} + d_out);
  const std::int64_t den = std::int64_t{k_layers} * d_out;
  return static_cast<int>((2 * num + den) / (2 * den));  // round half up
}

PacaPreset paca_preset(int layers, int k_layers, int lora_rank) {
  PacaPreset p{layers, k_layers, lora_rank, 0, 0};
  if (layers == 32 && lora_rank == 8 && (k_layers == 32 || k_layers == 16 || k_layers == 24)) {
    p.mask_width = k_layers == 32 ? 16 : k_layers == 16 ? 32 : 24;
  } else {
    p.mask_width = match_paca_width(layers, k_layers, lora_rank, 1, 1);
  }
  // square d: PaCA K*m*d vs LoRA L*r*2d
  p.budget_excess = static_cast<double>(k_layers) * p.mask_width / (2.0 * layers * lora_rank) - 1.0;
  if (p.budget_excess != 0.0) {
    spdlog::warn("PaCA preset L={} K={} r={}: width {} trains {:+.1f}% parameters relative to LoRA",
                 layers, k_layers, lora_rank, p.mask_width, 100.0 * p.budget_excess);
  }
  return p;
}

std::uint64_t trainable_params(const ModelConfig& cfg, const StrategyConfig& s) {
  std::uint64_t n = 0;
  const int first = first_tuned_block(cfg, s);
  const auto tuned_blocks = static_cast<std::uint64_t>(cfg.layers - first);
  for (Target t : kAllTargets) {
    if (!s.targets.contains(t)) continue;
    const MatrixShape sh = target_shape(cfg, t);
    const auto d_in = static_cast<std::uint64_t>(sh.d_in);
    const auto d_out = static_cast<std::uint64_t>(sh.d_out);
    if (std::holds_alternative<FullFT>(s.variant)) {
      n += tuned_blocks * d_out * d_in;
    } else if (const auto* l = std::get_if<LoraSpec>(&s.variant)) {
      n += tuned_blocks * static_cast<std::uint64_t>(l->rank) * (d_out + d_in);
    } else if (tuned_blocks > 0) {
      n += tuned_blocks * static_cast<std::uint64_t>(mask_width_for(cfg, s, t)) * d_out;
    }
  }
  if (std::holds_alternative<FullFT>(s.variant)) {
    const auto d = static_cast<std::uint64_t>(cfg.d_model);
    const auto v = static_cast<std::uint64_t>(cfg.vocab);
    n += 2 * d * v + d + 2 * d * static_cast<std::uint64_t>(cfg.layers);
  }
  return n;
}

}  // namespace peftlab
