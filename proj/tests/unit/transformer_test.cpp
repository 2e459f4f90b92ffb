// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "peftlab/adapters.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/loss.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/strategy.hpp"
#include "peftlab/workbench/gradcheck.hpp"
#include "test_support.hpp"

namespace peftlab {
namespace {

using testing::random_targets;
using testing::random_tokens;

constexpr ModelConfig kSmall{2, 16, 2, 24, 13, 8};

StrategyConfig full_ft() { return {FullFT{}, TargetSet::all(), 3, ""}; }

StrategyConfig top_blocks(int k) { return {SelectivePacaSpec{k, 4, std::nullopt}, TargetSet::all(), 3, ""}; }

TEST(Forward, IdentityLinearSublayerIsExact) {
  Rng rng(1);
  const Matrix x = testing::uniform_matrix(rng, 6, 5);
  EXPECT_EQ(dense_forward(Matrix::identity(6), x, "fwd"), x);
}

TEST(Forward, LogitsShape) {
  const ModelConfig cfg{2, 16, 2, 24, 32, 8};
  const TransformerModel m = TransformerModel::random(cfg, 1);
  Rng rng(2);
  const ForwardResult r = forward(m, random_tokens(rng, 2, 8, 32));
  EXPECT_EQ(r.logits.batch, 2);
  EXPECT_EQ(r.logits.seq, 8);
  EXPECT_EQ(r.logits.vocab, 32);
  EXPECT_EQ(r.logits.values.rows(), 32u);
  EXPECT_EQ(r.logits.values.cols(), 16u);
}

TEST(Forward, RepeatedCallsAreBitwiseIdentical) {
  const TransformerModel m = TransformerModel::random(kSmall, 3);
  Rng rng(4);
  const TokenBatch tb = random_tokens(rng, 2, 7, kSmall.vocab);
  EXPECT_EQ(forward(m, tb).logits.values, forward(m, tb).logits.values);
}

TEST(Forward, FreezingNeverChangesOutputs) {
  TransformerModel m = TransformerModel::random(kSmall, 5);
  Rng rng(6);
  const TokenBatch tb = random_tokens(rng, 2, 6, kSmall.vocab);
  ForwardOptions all, none;
  all.cache_from = 0;
  none.cache_from = kSmall.layers;
  const Matrix frozen = forward(m, tb, none).logits.values;
  EXPECT_EQ(forward(m, tb, all).logits.values, frozen);
  apply_strategy(m, top_blocks(1));
  EXPECT_EQ(forward(m, tb).logits.values, frozen);
}

TEST(Forward, CausalMaskHidesFutureTokens) {
  const TransformerModel m = TransformerModel::random(kSmall, 7, 0.3);
  Rng rng(8);
  TokenBatch a = random_tokens(rng, 1, 8, kSmall.vocab);
  TokenBatch b = a;
  b.ids[7] = (b.ids[7] + 1) % kSmall.vocab;
  const Logits la = forward(m, a).logits;
  const Logits lb = forward(m, b).logits;
  for (int t = 0; t < 7; ++t) {
    for (int v = 0; v < kSmall.vocab; ++v) ASSERT_EQ(la.at(0, t, v), lb.at(0, t, v));
  }
}

TEST(Forward, RejectsBadTokensAndLongSequences) {
  const TransformerModel m = TransformerModel::random(kSmall, 9);
  EXPECT_THROW((void)forward(m, TokenBatch{1, 2, {0, kSmall.vocab}}), ContractViolation);
  EXPECT_THROW((void)forward(m, TokenBatch{1, 2, {-1, 0}}), ContractViolation);
  EXPECT_THROW((void)forward(m, TokenBatch{1, 9, std::vector<int>(9, 0)}), ContractViolation);
}

TEST(Forward, CacheCoversExactlyTheTrainableBlocks) {
  const ModelConfig cfg{4, 16, 2, 24, 13, 8};
  Rng rng(10);
  const TokenBatch tb = random_tokens(rng, 1, 4, cfg.vocab);
  for (int k = 0; k <= cfg.layers; ++k) {
    TransformerModel m = TransformerModel::random(cfg, 11);
    apply_strategy(m, top_blocks(k));
    const ActivationCache c = forward(m, tb).cache;
    EXPECT_EQ(c.first_cached, cfg.layers - k);
    EXPECT_EQ(static_cast<int>(c.blocks.size()), k);
  }
}

TEST(Backward, AllFrozenGivesNoGradientsAndNoKernels) {
  const TransformerModel m = TransformerModel::random(kSmall, 12);
  Rng rng(13);
  const TokenBatch tb = random_tokens(rng, 1, 4, kSmall.vocab);
  const ForwardResult fr = forward(m, tb);
  OpCounter c;
  GradientSet g;
  {
    CountingScope s(c);
    g = backward(m, fr.cache, gaussian_matrix(rng, kSmall.vocab, 4, 1));
  }
  EXPECT_TRUE(g.empty());
  EXPECT_EQ(c.total().kernels, 0u);
}

TEST(Backward, TopBlockOnlyRunsFewerKernels) {
  Rng rng(14);
  const TokenBatch tb = random_tokens(rng, 1, 4, kSmall.vocab);
  const Matrix gl = gaussian_matrix(rng, kSmall.vocab, 4, 1);
  auto bwd_kernels = [&](const StrategyConfig& s) {
    TransformerModel m = TransformerModel::random(kSmall, 15);
    apply_strategy(m, s);
    const ForwardResult fr = forward(m, tb);
    OpCounter c;
    CountingScope scope(c);
    (void)backward(m, fr.cache, gl);
    return c.total().kernels;
  };
  StrategyConfig all_dense = full_ft();
  StrategyConfig top_dense = top_blocks(1);
  EXPECT_LT(bwd_kernels(top_dense), bwd_kernels(all_dense));
  EXPECT_LT(bwd_kernels(top_dense), bwd_kernels(top_blocks(2)));
}

TEST(Backward, TruncatesAtTheLowestTrainableBlock) {
  const ModelConfig cfg{4, 16, 2, 24, 13, 8};
  Rng rng(16);
  const TokenBatch tb = random_tokens(rng, 2, 5, cfg.vocab);
  const Matrix gl = gaussian_matrix(rng, cfg.vocab, 10, 1);
  for (int k = 1; k <= cfg.layers; ++k) {
    for (const StrategyConfig& s :
         {top_blocks(k), StrategyConfig{LoraSpec{2, 4, 0}, TargetSet::all(), 1, ""}}) {
      TransformerModel m = TransformerModel::random(cfg, 17);
      apply_strategy(m, s);
      const int lowest = *m.lowest_trainable_block();
      const ForwardResult fr = forward(m, tb);
      OpCounter c;
      {
        CountingScope scope(c);
        (void)backward(m, fr.cache, gl);
      }
      for (const auto& [tag, t] : c.by_tag()) {
        if (tag.rfind("blk", 0) != 0 || tag.find("bwd") == std::string::npos) continue;
        const int blk = std::stoi(tag.substr(3));
        EXPECT_GE(blk, lowest) << tag;
        if (blk == lowest) {
          EXPECT_EQ(tag.find("/Q/bwd_x"), std::string::npos) << tag;
          EXPECT_EQ(tag.find("/K/bwd_x"), std::string::npos) << tag;
          EXPECT_EQ(tag.find("/V/bwd_x"), std::string::npos) << tag;
          EXPECT_EQ(tag.find("norm1/bwd"), std::string::npos) << tag;
        }
      }
      EXPECT_EQ(c.by_tag().count("embed/bwd_w"), 0u);
    }
  }
}

TEST(Backward, GradientsOnlyForTrainableParameters) {
  TransformerModel m = TransformerModel::random(kSmall, 18);
  apply_strategy(m, top_blocks(1));
  Rng rng(19);
  const TokenBatch tb = random_tokens(rng, 1, 4, kSmall.vocab);
  const GradientSet g = backward(m, forward(m, tb).cache, gaussian_matrix(rng, kSmall.vocab, 4, 1));
  std::vector<std::string> names;
  for (const ParameterRef& p : trainable_parameters(m)) names.push_back(p.name);
  std::vector<std::string> got;
  for (const auto& [name, mat] : g) got.push_back(name);
  EXPECT_EQ(got, names);
  EXPECT_EQ(got.size(), 7u);
  for (const std::string& n : got) EXPECT_EQ(n.rfind("blk1.", 0), 0u) << n;
}

TEST(Backward, MissingCacheIsRejected) {
  TransformerModel m = TransformerModel::random(kSmall, 20);
  Rng rng(21);
  const TokenBatch tb = random_tokens(rng, 1, 4, kSmall.vocab);
  const ActivationCache frozen_cache = forward(m, tb).cache;
  apply_strategy(m, full_ft());
  EXPECT_THROW((void)backward(m, frozen_cache, gaussian_matrix(rng, kSmall.vocab, 4, 1)), ContractViolation);
}

TEST(GradientCheck, FullModelMatchesFiniteDifferences) {
  TransformerModel m = TransformerModel::random({2, 16, 2, 24, 13, 4}, 22, 0.3);
  apply_strategy(m, full_ft());
  Rng rng(23);
  const TokenBatch tb = random_tokens(rng, 1, 4, 13);
  const auto rep = workbench::gradient_check(m, tb, random_targets(rng, 4, 13));
  EXPECT_LT(rep.max_rel_error, 1e-6) << rep.worst_tensor;
  EXPECT_EQ(rep.tensors.size(), 3u + 2 * 9);
}

// Property sweep: layers, widths, heads and every strategy.
TEST(GradientCheck, RandomSmallConfigsAllStrategies) {
  Rng rng(24);
  int cases = 0;
  for (int layers : {1, 2}) {
    for (int d : {8, 16}) {
      for (int heads : {1, 2}) {
        const ModelConfig cfg{layers, d, heads, 12, 9, 6};
        const std::vector<StrategyConfig> strategies{
            full_ft(),
            {LoraSpec{2, 6, 0.2}, TargetSet::all(), 5, ""},
            {PacaSpec{3, std::nullopt}, TargetSet::all(), 5, ""},
            {SelectivePacaSpec{1, 5, std::nullopt}, TargetSet::all(), 5, ""}};
        for (const StrategyConfig& s : strategies) {
          TransformerModel m = TransformerModel::random(cfg, rng.next_u64(), 0.3);
          apply_strategy(m, s);
          for (Block& b : m.blocks) {
            for (LinearSlot& slot : b.proj) {
              if (slot.lora) slot.lora->b = gaussian_matrix(rng, slot.lora->b.rows(), slot.lora->b.cols(), 0.3);
            }
          }
          const TokenBatch tb = random_tokens(rng, 2, 3, cfg.vocab);
          const auto rep = workbench::gradient_check(m, tb, random_targets(rng, 6, cfg.vocab), {1e-5, 77});
          EXPECT_LT(rep.max_rel_error, 1e-6)
              << s.name() << " L=" << layers << " d=" << d << " heads=" << heads << " worst " << rep.worst_tensor;
          ++cases;
        }
      }
    }
  }
  EXPECT_EQ(cases, 32);
}

TEST(GradientCheck, DetectsAFlippedBackward) {
  TransformerModel m = TransformerModel::random(kSmall, 25, 0.3);
  apply_strategy(m, top_blocks(2));
  Rng rng(26);
  const TokenBatch tb = random_tokens(rng, 1, 4, kSmall.vocab);
  const std::vector<int> targets = random_targets(rng, 4, kSmall.vocab);
  debug::set_backward_sign_flip(true);
  const auto rep = workbench::gradient_check(m, tb, targets);
  debug::set_backward_sign_flip(false);
  EXPECT_GT(rep.max_rel_error, 1.0);
}

}  // namespace
}  // namespace peftlab
