// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "peftlab/checkpoint.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/loss.hpp"
#include "peftlab/train.hpp"

namespace peftlab {
namespace {

SyntheticTask copy_task(int train = 64, int val = 16) { return {TaskKind::Copy, 13, 8, train, val, 5}; }

TrainHyper quick_hyper() {
  TrainHyper h;
  h.batch = 4;
  h.grad_accum = 2;
  h.max_steps = 6;
  h.lr = h.paca_lr = 1e-2;
  h.warmup_steps = 2;
  h.eval_batch = 8;
  h.seed = 11;
  return h;
}

constexpr ModelConfig kCfg{3, 16, 2, 24, 13, 8};

TEST(Dataset, DeterministicPerSeed) {
  const Dataset a = make_dataset(copy_task());
  const Dataset b = make_dataset(copy_task());
  ASSERT_EQ(a.train.size(), 64u);
  ASSERT_EQ(a.val.size(), 16u);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].input, b.train[i].input);
  SyntheticTask other = copy_task();
  other.seed = 6;
  EXPECT_NE(make_dataset(other).train[0].input, a.train[0].input);
}

TEST(Dataset, TrainAndValAreDisjoint) {
  const SyntheticTask t{TaskKind::Reverse, 4, 6, 20, 6, 1};  // 27 distinct prefixes
  const Dataset d = make_dataset(t);
  std::set<std::uint64_t> ids;
  std::set<std::vector<int>> train_prefixes;
  for (const Example& e : d.train) {
    ids.insert(e.id);
    train_prefixes.insert({e.input.begin(), e.input.begin() + 3});
  }
  for (const Example& e : d.val) {
    EXPECT_FALSE(ids.contains(e.id));
    EXPECT_FALSE(train_prefixes.contains({e.input.begin(), e.input.begin() + 3}));
  }
  EXPECT_THROW((void)make_dataset({TaskKind::Reverse, 4, 6, 20, 8, 1}), ConfigError);
}

TEST(Dataset, CopyTargetsHoldThePrefix) {
  for (const Example& e : make_dataset(copy_task()).train) {
    ASSERT_EQ(e.input.size(), 8u);
    EXPECT_EQ(e.input[4], kDelimiterToken);
    for (int i = 0; i < 4; ++i) {
      EXPECT_NE(e.input[static_cast<std::size_t>(i)], kDelimiterToken);
      EXPECT_EQ(e.target[static_cast<std::size_t>(i)], kIgnoreTarget);
      EXPECT_EQ(e.target[static_cast<std::size_t>(4 + i)], e.input[static_cast<std::size_t>(i)]);
    }
  }
}

TEST(Dataset, ReverseAndModularSum) {
  const Example r = make_dataset({TaskKind::Reverse, 13, 8, 4, 2, 2}).train[0];
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r.target[static_cast<std::size_t>(4 + i)], r.input[static_cast<std::size_t>(3 - i)]);
  const Example m = make_dataset({TaskKind::ModularSum, 13, 5, 4, 2, 2}).train[0];
  int sum = 0;
  for (int i = 0; i < 4; ++i) sum += m.input[static_cast<std::size_t>(i)];
  EXPECT_EQ(m.target[4], 1 + sum % 12);
  EXPECT_EQ(std::count(m.target.begin(), m.target.end(), kIgnoreTarget), 4);
}

TEST(Dataset, Validation) {
  EXPECT_THROW((void)make_dataset({TaskKind::Copy, 13, 7, 4, 2, 0}), ConfigError);
  EXPECT_THROW((void)make_dataset({TaskKind::Copy, 2, 8, 4, 2, 0}), ConfigError);
  EXPECT_THROW((void)make_dataset({TaskKind::Copy, 13, 8, 0, 2, 0}), ConfigError);
  EXPECT_EQ(parse_task_kind("modular_sum"), TaskKind::ModularSum);
  EXPECT_FALSE(parse_task_kind("sum").has_value());
}

TEST(Batching, StacksExamples) {
  const Dataset d = make_dataset(copy_task());
  const Batch b = make_batch(std::span<const Example>(d.train.data(), 3));
  EXPECT_EQ(b.tokens.batch, 3);
  EXPECT_EQ(b.tokens.seq, 8);
  EXPECT_EQ(b.tokens.at(2, 1), d.train[2].input[1]);
  EXPECT_EQ(b.targets[8 + 5], d.train[1].target[5]);
  EXPECT_THROW((void)make_batch(std::span<const Example>()), ContractViolation);
}

TEST(Evaluate, ZeroLogitsGiveLogVocab) {
  const Dataset d = make_dataset(copy_task());
  const EvalResult r = evaluate(
      [](const TokenBatch& tb) {
        return Logits{tb.batch, tb.seq, 13, Matrix(13, static_cast<std::size_t>(tb.batch * tb.seq), 0)};
      },
      d.val, 5);
  EXPECT_NEAR(r.loss, std::log(13.0), 1e-12);
  EXPECT_EQ(r.positions, 16 * 4);
}

TEST(Evaluate, EchoModelIsPerfectOnCopy) {
  const Dataset d = make_dataset(copy_task());
  const EvalResult r = evaluate(
      [](const TokenBatch& tb) {
        Logits lg{tb.batch, tb.seq, 13, Matrix(13, static_cast<std::size_t>(tb.batch * tb.seq), 0)};
        for (int n = 0; n < tb.batch; ++n) {
          for (int t = 4; t < tb.seq; ++t) {
            lg.values(static_cast<std::size_t>(tb.at(n, t - 4)), static_cast<std::size_t>(n * tb.seq + t)) = 10;
          }
        }
        return lg;
      },
      d.val, 3);
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(Evaluate, RepeatableAndNonMutating) {
  const Dataset d = make_dataset(copy_task());
  const TransformerModel m = TransformerModel::random(kCfg, 1);
  const std::string before = serialize_checkpoint(m);
  const EvalResult a = evaluate(m, d.val, 7);
  const EvalResult b = evaluate(m, d.val, 7);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(serialize_checkpoint(m), before);
  EXPECT_THROW((void)evaluate(m, std::span<const Example>(), 7), ContractViolation);
}

TEST(Train, NoTuningKeepsLossExactly) {
  const Dataset d = make_dataset(copy_task());
  TransformerModel m = TransformerModel::random(kCfg, 2);
  const TrainReport r = train(m, {SelectivePacaSpec{0, 0, std::nullopt}, TargetSet::all(), 0, "no_tuning"}, d,
                              quick_hyper(), "copy");
  EXPECT_EQ(r.final_val_loss, r.initial_val_loss);
  EXPECT_EQ(r.trainable_params, 0u);
  EXPECT_EQ(r.strategy, "no_tuning");
  EXPECT_TRUE(diff_weights(TransformerModel::random(kCfg, 2), m).empty());
}

TEST(Train, DeterministicReports) {
  const Dataset d = make_dataset(copy_task());
  for (const StrategyConfig& s : default_suite(kCfg, 2, 3, 8, 0.1)) {
    TransformerModel a = TransformerModel::random(kCfg, 4);
    TransformerModel b = TransformerModel::random(kCfg, 4);
    const TrainReport ra = train(a, s, d, quick_hyper());
    const TrainReport rb = train(b, s, d, quick_hyper());
    EXPECT_EQ(ra.final_val_loss, rb.final_val_loss) << s.name();
    EXPECT_EQ(ra.last_train_loss, rb.last_train_loss) << s.name();
    EXPECT_EQ(ra.steps, 6) << s.name();
    EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b)) << s.name();
  }
}

TEST(Train, SelectiveTouchesOnlySelectedColumnsOfTopBlocks) {
  const Dataset d = make_dataset(copy_task());
  const TransformerModel before = TransformerModel::random(kCfg, 6);
  TransformerModel m = before;
  const StrategyConfig s{SelectivePacaSpec{2, 3, std::nullopt}, TargetSet::all(), 8, ""};
  (void)train(m, s, d, quick_hyper());
  const auto diffs = diff_weights(before, m);
  EXPECT_FALSE(diffs.empty());
  for (const TensorDiff& diff : diffs) {
    ASSERT_EQ(diff.name.rfind("blk", 0), 0u) << diff.name;
    const int blk = diff.name[3] - '0';
    EXPECT_GE(blk, 1) << diff.name;
    const std::string target = diff.name.substr(diff.name.find('.') + 1);
    const auto t = parse_target(target);
    ASSERT_TRUE(t.has_value()) << diff.name;
    const auto& sel = m.blocks[static_cast<std::size_t>(blk)].slot(*t).columns->selected();
    for (std::size_t c : diff.changed_columns) {
      EXPECT_TRUE(std::binary_search(sel.begin(), sel.end(), c)) << diff.name << " column " << c;
    }
  }
}

TEST(Train, LoraLeavesBaseWeightsUntouched) {
  const Dataset d = make_dataset(copy_task());
  const TransformerModel before = TransformerModel::random(kCfg, 7);
  TransformerModel m = before;
  (void)train(m, {LoraSpec{2, 8, 0.1}, TargetSet::all(), 1, ""}, d, quick_hyper());
  EXPECT_TRUE(diff_weights(before, m).empty());
  EXPECT_GT(max_abs(m.blocks[0].slot(Target::Q).lora->b), 0);
}

TEST(Train, LossDecreasesWithFullFineTuning) {
  const Dataset d = make_dataset(copy_task(128, 16));
  TransformerModel m = TransformerModel::random(kCfg, 9, 0.1);
  TrainHyper h = quick_hyper();
  h.max_steps = 40;
  const TrainReport r = train(m, {FullFT{}, TargetSet::all(), 0, ""}, d, h);
  EXPECT_LT(r.final_val_loss, r.initial_val_loss);
  EXPECT_EQ(r.micro_batches, 80);
}

TEST(Train, DivergenceIsReported) {
  const Dataset d = make_dataset(copy_task());
  TransformerModel m = TransformerModel::random(kCfg, 10);
  m.blocks[2].slot(Target::Down).weight(0, 0) = std::numeric_limits<real_t>::quiet_NaN();
  EXPECT_THROW((void)train(m, {FullFT{}, TargetSet::all(), 0, ""}, d, quick_hyper()), DivergenceError);
}

TEST(Train, PlannedStepsAndValidation) {
  TrainHyper h;
  h.batch = 8;
  h.grad_accum = 4;
  h.epochs = 2;
  EXPECT_EQ(planned_steps(512, h), 32);
  EXPECT_EQ(planned_steps(100, h), 8);  // 13 micro-batches per epoch, partial group flushed
  h.max_steps = 5;
  EXPECT_EQ(planned_steps(512, h), 5);
  h.batch = 0;
  EXPECT_THROW(h.validate(), ConfigError);
}

TEST(DefaultSuite, FiveRowsWithMatchedBudgets) {
  const ModelConfig cfg{4, 128, 4, 256, 64, 8};
  const auto suite = default_suite(cfg, 8);
  ASSERT_EQ(suite.size(), 5u);
  EXPECT_EQ(trainable_params(cfg, suite[0]), 0u);
  const auto lora = trainable_params(cfg, suite[1]);
  for (std::size_t i = 2; i < 5; ++i) {
    EXPECT_NEAR(static_cast<double>(trainable_params(cfg, suite[i])) / static_cast<double>(lora), 1.0, 0.02)
        << suite[i].name();
  }
  EXPECT_EQ(std::get<SelectivePacaSpec>(suite[3].variant).k_layers, 2);
  EXPECT_EQ(std::get<SelectivePacaSpec>(suite[4].variant).k_layers, 3);
}

}  // namespace
}  // namespace peftlab
