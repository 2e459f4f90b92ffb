// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "peftlab/cost_model.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/strategy.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {
namespace {

TargetSet attention_targets() {
  TargetSet t;
  for (Target x : {Target::Q, Target::K, Target::V, Target::O}) t.insert(x);
  return t;
}

TEST(MatchPacaWidth, SquarePresets) {
  EXPECT_EQ(match_paca_width(32, 32, 8, 4096, 4096), 16);
  EXPECT_EQ(match_paca_width(32, 16, 8, 4096, 4096), 32);
  EXPECT_EQ(match_paca_width(32, 24, 8, 4096, 4096), 21);
  EXPECT_EQ(match_paca_width(32, 16, 8, 1, 1), 32);
}

TEST(MatchPacaWidth, RectangularRoundsToNearest) {
  // 4 * 2 * (64 + 172) / (3 * 172) = 3.66
  EXPECT_EQ(match_paca_width(4, 3, 2, 64, 172), 4);
  // 2 * 1 * (10 + 30) / (1 * 30) = 2.67
  EXPECT_EQ(match_paca_width(2, 1, 1, 10, 30), 3);
}

TEST(MatchPacaWidth, Errors) {
  EXPECT_THROW((void)match_paca_width(4, 0, 8, 16, 16), ContractViolation);
  EXPECT_THROW((void)match_paca_width(4, 5, 8, 16, 16), ContractViolation);
  EXPECT_THROW((void)match_paca_width(4, 2, 0, 16, 16), ContractViolation);
}

TEST(PacaPreset, ThreeQuartersUsesTwentyFourWithExcess) {
  const PacaPreset p = paca_preset(32, 24, 8);
  EXPECT_EQ(p.mask_width, 24);
  EXPECT_NEAR(p.budget_excess, 0.125, 1e-15);
  EXPECT_EQ(24 * 24, 576);
  EXPECT_EQ(paca_preset(32, 32, 8).mask_width, 16);
  EXPECT_EQ(paca_preset(32, 16, 8).mask_width, 32);
  EXPECT_EQ(paca_preset(32, 16, 8).budget_excess, 0.0);
  EXPECT_EQ(paca_preset(8, 2, 4).mask_width, 32);
}

TEST(TrainableParams, SingleLargeMatrix) {
  const LayerDims dims{4096, 4096, 1};
  EXPECT_EQ(cost_lora(dims, 8).trainable_params, 65536u);
  EXPECT_EQ(cost_paca(dims, 16).trainable_params, 65536u);
  EXPECT_EQ(cost_fullft(dims).trainable_params, 4096u * 4096u);
}

TEST(TrainableParams, FullModelEqualityOnSquareTargets) {
  const ModelConfig cfg{32, 64, 4, 128, 16, 8};
  const TargetSet t = attention_targets();
  const auto lora = trainable_params(cfg, {LoraSpec{8, 16, 0}, t, 0, ""});
  const auto paca = trainable_params(cfg, {PacaSpec{16, std::nullopt}, t, 0, ""});
  const auto sel = trainable_params(cfg, {SelectivePacaSpec{16, 32, std::nullopt}, t, 0, ""});
  EXPECT_EQ(lora, 32u * 4 * 8 * 128);
  EXPECT_EQ(paca, lora);
  EXPECT_EQ(sel, lora);
}

TEST(TrainableParams, MatchesInstantiatedModel) {
  const ModelConfig cfg{3, 16, 2, 24, 11, 8};
  const std::vector<StrategyConfig> all{
      {FullFT{}, TargetSet::all(), 0, ""},
      {LoraSpec{2, 4, 0}, TargetSet::all(), 0, ""},
      {PacaSpec{5, std::nullopt}, TargetSet::all(), 0, ""},
      {SelectivePacaSpec{2, 0, 2}, TargetSet::all(), 0, ""},
      {SelectivePacaSpec{1, 3, std::nullopt}, attention_targets(), 0, ""},
      {SelectivePacaSpec{0, 0, std::nullopt}, TargetSet::all(), 0, ""}};
  for (const StrategyConfig& s : all) {
    TransformerModel m = TransformerModel::random(cfg, 1);
    apply_strategy(m, s);
    EXPECT_EQ(trainable_element_count(m), trainable_params(cfg, s)) << s.name();
  }
}

// Property: whenever K divides 2 r L exactly, the matched width equalizes budgets.
TEST(TrainableParams, BudgetInvarianceOnSquareTargets) {
  int checked = 0;
  for (int layers = 1; layers <= 16; ++layers) {
    const ModelConfig cfg{layers, 64, 4, 128, 16, 8};
    for (int k = 1; k <= layers; ++k) {
      for (int r = 1; r <= 8; ++r) {
        if ((2 * r * layers) % k != 0 || 2 * r * layers / k > cfg.d_model) continue;
        const StrategyConfig sel{SelectivePacaSpec{k, 0, r}, attention_targets(), 0, ""};
        const StrategyConfig lora{LoraSpec{r, 16, 0}, attention_targets(), 0, ""};
        EXPECT_EQ(trainable_params(cfg, sel), trainable_params(cfg, lora)) << layers << " " << k << " " << r;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 200);
}

TEST(ApplyStrategy, SelectiveTunesOnlyTopBlocks) {
  const ModelConfig cfg{4, 16, 2, 24, 11, 8};
  TransformerModel m = TransformerModel::random(cfg, 2);
  apply_strategy(m, {SelectivePacaSpec{2, 4, std::nullopt}, TargetSet::all(), 9, ""});
  EXPECT_EQ(m.lowest_trainable_block(), 2);
  for (int i = 0; i < 4; ++i) {
    for (Target t : kAllTargets) {
      const LinearSlot& s = m.blocks[static_cast<std::size_t>(i)].slot(t);
      if (i < 2) {
        EXPECT_EQ(s.mode, Trainability::Frozen);
        EXPECT_FALSE(s.columns.has_value());
      } else {
        EXPECT_EQ(s.mode, Trainability::Columns);
        EXPECT_EQ(s.columns->size(), 4u);
      }
    }
  }
  EXPECT_FALSE(m.embed_trainable || m.head_trainable || m.final_norm_trainable);
}

TEST(ApplyStrategy, LoraAttachesZeroBAdaptersToTargets) {
  TransformerModel m = TransformerModel::random({2, 16, 2, 24, 11, 8}, 3);
  apply_strategy(m, {LoraSpec{3, 6, 0.1}, attention_targets(), 1, ""});
  for (const Block& b : m.blocks) {
    for (Target t : kAllTargets) {
      const LinearSlot& s = b.slot(t);
      const bool tuned = attention_targets().contains(t);
      EXPECT_EQ(s.lora.has_value(), tuned);
      if (tuned) {
        EXPECT_EQ(s.lora->rank, 3);
        EXPECT_EQ(max_abs(s.lora->b), 0);
      }
    }
  }
  apply_strategy(m, {FullFT{}, TargetSet::all(), 0, ""});
  for (const Block& b : m.blocks) {
    for (const LinearSlot& s : b.proj) {
      EXPECT_FALSE(s.lora.has_value());
      EXPECT_EQ(s.mode, Trainability::Dense);
    }
  }
}

TEST(StrategyConfigTest, Names) {
  EXPECT_EQ(StrategyConfig{}.name(), "full");
  EXPECT_EQ((StrategyConfig{LoraSpec{8, 32, 0.1}, TargetSet::all(), 0, ""}.name()), "lora_r8");
  EXPECT_EQ((StrategyConfig{PacaSpec{0, 8}, TargetSet::all(), 0, ""}.name()), "paca_match_r8");
  EXPECT_EQ((StrategyConfig{SelectivePacaSpec{2, 16, std::nullopt}, TargetSet::all(), 0, ""}.name()),
            "selective_paca_k2_m16");
  EXPECT_EQ((StrategyConfig{SelectivePacaSpec{2, 16, 4}, TargetSet::all(), 0, ""}.name()),
            "selective_paca_k2_match_r4");
  EXPECT_EQ((StrategyConfig{FullFT{}, TargetSet::all(), 0, "x"}.name()), "x");
  EXPECT_EQ((StrategyConfig{SelectivePacaSpec{}, TargetSet::all(), 0, ""}.variant_name()), "selective_paca");
}

TEST(StrategyConfigTest, ValidationErrors) {
  const ModelConfig cfg{4, 16, 2, 24, 11, 8};
  EXPECT_THROW((StrategyConfig{LoraSpec{0, 8, 0}, TargetSet::all(), 0, ""}.validate(cfg)), ConfigError);
  EXPECT_THROW((StrategyConfig{LoraSpec{2, 8, 1}, TargetSet::all(), 0, ""}.validate(cfg)), ConfigError);
  EXPECT_THROW((StrategyConfig{SelectivePacaSpec{5, 2, std::nullopt}, TargetSet::all(), 0, ""}.validate(cfg)),
               ConfigError);
  EXPECT_THROW((StrategyConfig{PacaSpec{17, std::nullopt}, TargetSet::all(), 0, ""}.validate(cfg)), ConfigError);
  EXPECT_THROW((StrategyConfig{PacaSpec{-1, std::nullopt}, TargetSet::all(), 0, ""}.validate(cfg)), ConfigError);
  EXPECT_NO_THROW((StrategyConfig{PacaSpec{16, std::nullopt}, TargetSet::all(), 0, ""}.validate(cfg)));
}

}  // namespace
}  // namespace peftlab
