// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/model_config.hpp"

#include <fmt/format.h>

#include "peftlab/errors.hpp"

namespace peftlab {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(fmt::format("model.{}: must be >= 1 (got {})", name, v));
  };
  positive(layers, "layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(vocab, "vocab");
  positive(seq_len, "seq_len");
  if (d_model % n_heads != 0) {
    throw ConfigError(fmt::format("model.n_heads: d_model {} is not divisible by n_heads {}",
                                  d_model, n_heads));
  }
  if (!(norm_eps > 0)) throw ConfigError("model.norm_eps: must be > 0");
  if (!(rope_base > 0)) throw ConfigError("model.rope_base: must be > 0");
}

std::string_view target_name(Target t) noexcept {
  switch (t) {
    case Target::Q: return "Q";
    case Target::K: return "K";
    case Target::V: return "V";
    case Target::O: return "O";
    case Target::Up: return "Up";
    case Target::Down: return "Down";
    case Target::Gate: return "Gate";
  }
  return "?";
}

std::optional<Target> parse_target(std::string_view name) noexcept {
  for (Target t : kAllTargets) {
    if (target_name(t) == name) return t;
  }
  return std::nullopt;
}

MatrixShape target_shape(const ModelConfig& cfg, Target t) noexcept {
  switch (t) {
    case Target::Up:
    case Target::Gate: return {cfg.d_ff, cfg.d_model};
    case Target::Down: return {cfg.d_model, cfg.d_ff};
    default: return {cfg.d_model, cfg.d_model};
  }
}

TargetSet TargetSet::all() noexcept {
  TargetSet s;
  for (Target t : kAllTargets) s.insert(t);
  return s;
}

std::string config_hash(const ModelConfig& cfg) {
  const std::string canon =
      fmt::format("layers={};d_model={};n_heads={};d_ff={};vocab={};seq_len={};eps={:.17g};rope={:.17g}",
                  cfg.layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab, cfg.seq_len,
                  cfg.norm_eps, cfg.rope_base);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

}  // namespace peftlab
