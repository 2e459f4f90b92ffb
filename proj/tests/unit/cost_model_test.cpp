// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/cost_model.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/loss.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/strategy.hpp"
#include "test_support.hpp"

namespace peftlab {
namespace {

using testing::uniform_matrix;

// 2 m k n per product.
std::uint64_t mm(std::int64_t m, std::int64_t k, std::int64_t n) { return static_cast<std::uint64_t>(2 * m * k * n); }

TEST(CostFullFT, Examples) {
  const CostEstimate c = cost_fullft({1024, 1024, 4});
  EXPECT_EQ(c.fwd_flops, 8388608u);
  EXPECT_EQ(c.fwd_kernels, 1u);
  EXPECT_EQ(c.bwd_kernels, 2u);
  EXPECT_EQ(c.trainable_params, 1024u * 1024u);
  for (const LayerDims d : {LayerDims{3, 5, 7}, LayerDims{128, 64, 2}, LayerDims{1, 1, 1}}) {
    const CostEstimate e = cost_fullft(d);
    EXPECT_EQ(e.bwd_flops, 2 * e.fwd_flops);
  }
}

TEST(CostLora, ClosedForm) {
  const LayerDims d{48, 40, 6};
  const std::int64_t r = 5;
  const CostEstimate c = cost_lora(d, r);
  EXPECT_EQ(c.fwd_flops, mm(40, 48, 6) + mm(r, 48, 6) + mm(40, r, 6));
  EXPECT_EQ(c.bwd_flops, mm(48, 40, 6) + mm(r, 40, 6) + mm(48, r, 6) + mm(40, 6, r) + mm(r, 6, 48));
  EXPECT_EQ(c.fwd_kernels, 3u);
  EXPECT_EQ(c.bwd_kernels, 5u);
  EXPECT_EQ(c.trainable_params, static_cast<std::uint64_t>(r * (48 + 40)));
}

TEST(CostLora, ForwardAlwaysAboveFullFT) {
  for (std::int64_t r = 1; r <= 64; ++r) {
    EXPECT_GT(cost_lora({64, 32, 3}, r).fwd_flops, cost_fullft({64, 32, 3}).fwd_flops);
  }
}

TEST(CostLora, BreakEvenRankForSquare4096) {
  const LayerDims d{4096, 4096, 4};
  const std::uint64_t full = cost_fullft(d).total_flops();
  std::int64_t largest = 0;
  for (std::int64_t r = 1; r <= 4096; ++r) {
    if (cost_lora(d, r).total_flops() < full) largest = r;
  }
  EXPECT_EQ(largest, 682);
  EXPECT_EQ(lora_break_even_rank(4096, 4096), 682);
  for (std::int64_t din : {7, 100, 512}) {
    for (std::int64_t dout : {3, 64, 1376}) {
      const std::int64_t be = lora_break_even_rank(din, dout);
      const LayerDims x{din, dout, 2};
      if (be > 0) {
        EXPECT_LT(cost_lora(x, be).total_flops(), cost_fullft(x).total_flops());
      }
      EXPECT_GE(cost_lora(x, be + 1).total_flops(), cost_fullft(x).total_flops());
    }
  }
}

TEST(CostPaca, Boundaries) {
  const LayerDims d{24, 16, 5};
  const CostEstimate full = cost_fullft(d);
  const CostEstimate all = cost_paca(d, 24);
  EXPECT_EQ(all.fwd_flops, full.fwd_flops);
  EXPECT_EQ(all.bwd_flops, full.bwd_flops);
  EXPECT_EQ(all.fwd_kernels, full.fwd_kernels);
  EXPECT_EQ(all.bwd_kernels, full.bwd_kernels);
  EXPECT_EQ(all.trainable_params, full.trainable_params);
  const CostEstimate none = cost_paca(d, 0);
  EXPECT_EQ(none.bwd_flops, mm(24, 16, 5));
  EXPECT_EQ(none.bwd_kernels, 1u);
  EXPECT_EQ(none.trainable_params, 0u);
}

// Instrumented per-layer runs against the closed forms.
struct LayerCase {
  std::int64_t d_in, d_out, n, r, m;
};

std::vector<LayerCase> random_cases(int count) {
  Rng rng(99);
  std::vector<LayerCase> out;
  for (int i = 0; i < count; ++i) {
    const auto d_in = static_cast<std::int64_t>(1 + rng.uniform_int(24));
    const auto d_out = static_cast<std::int64_t>(1 + rng.uniform_int(24));
    out.push_back({d_in, d_out, static_cast<std::int64_t>(1 + rng.uniform_int(6)),
                   static_cast<std::int64_t>(1 + rng.uniform_int(8)),
                   static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(d_in) + 1))});
  }
  return out;
}

void expect_counts(const OpCounter& f, const OpCounter& b, const CostEstimate& e) {
  EXPECT_EQ(f.matmul().flops, e.fwd_flops);
  EXPECT_EQ(f.matmul().kernels, e.fwd_kernels);
  EXPECT_EQ(b.matmul().flops, e.bwd_flops);
  EXPECT_EQ(b.matmul().kernels, e.bwd_kernels);
}

TEST(CostCounterExactness, RandomLayerTuples) {
  const auto cases = random_cases(100);
  for (const LayerCase& c : cases) {
    Rng rng(static_cast<std::uint64_t>(c.d_in * 1000 + c.d_out));
    const auto din = static_cast<std::size_t>(c.d_in), dout = static_cast<std::size_t>(c.d_out),
               n = static_cast<std::size_t>(c.n);
    const Matrix w = uniform_matrix(rng, dout, din);
    const Matrix x = uniform_matrix(rng, din, n);
    const Matrix g = uniform_matrix(rng, dout, n);
    const LayerDims dims{c.d_in, c.d_out, c.n};
    for (bool input_grad : {true, false}) {
      OpCounter f, b;
      {
        CountingScope s(f);
        (void)dense_forward(w, x, "fwd");
      }
      {
        CountingScope s(b);
        (void)dense_backward(w, x, g, input_grad, true);
      }
      expect_counts(f, b, cost_fullft(dims, input_grad));

      LoraAdapter ad = LoraAdapter::init(rng, static_cast<int>(dout), static_cast<int>(din),
                                         static_cast<int>(c.r), 4, 0);
      OpCounter lf, lb;
      LoraCache cache;
      {
        CountingScope s(lf);
        (void)lora_forward(w, ad, x, &cache);
      }
      {
        CountingScope s(lb);
        (void)lora_backward(w, ad, x, cache, g, input_grad);
      }
      expect_counts(lf, lb, cost_lora(dims, c.r, input_grad));

      const ColumnMask mask = select_columns(7, din, static_cast<std::size_t>(c.m));
      OpCounter pf, pb;
      {
        CountingScope s(pf);
        (void)dense_forward(w, x, "fwd");
      }
      {
        CountingScope s(pb);
        (void)paca_grad(w, mask, x, g);
        if (input_grad) (void)matmul_tn(w, g, "bwd_x");
      }
      expect_counts(pf, pb, cost_paca(dims, c.m, input_grad));
    }
  }
}

TEST(CostCounterExactness, SquareLoraWithFullRank) {
  const std::int64_t d = 12;
  Rng rng(5);
  const Matrix w = uniform_matrix(rng, 12, 12);
  const Matrix x = uniform_matrix(rng, 12, 3);
  LoraAdapter ad = LoraAdapter::init(rng, 12, 12, 12, 4, 0);
  OpCounter f, b;
  LoraCache cache;
  Matrix y;
  {
    CountingScope s(f);
    y = lora_forward(w, ad, x, &cache);
  }
  {
    CountingScope s(b);
    (void)lora_backward(w, ad, x, cache, y);
  }
  expect_counts(f, b, cost_lora({d, d, 3}, d));
}

CostEstimate instrumented_model(const ModelConfig& cfg, const StrategyConfig& s, int batch, int seq) {
  TransformerModel m = TransformerModel::random(cfg, 3);
  apply_strategy(m, s);
  Rng rng(4);
  const TokenBatch tb = testing::random_tokens(rng, batch, seq, cfg.vocab);
  OpCounter f, b;
  ForwardResult fr;
  {
    CountingScope scope(f);
    fr = forward(m, tb);
  }
  const LossResult lr = cross_entropy_loss(fr.logits, testing::random_targets(rng, tb.ids.size(), cfg.vocab));
  if (m.any_trainable()) {
    CountingScope scope(b);
    (void)backward(m, fr.cache, lr.grad_logits);
  }
  CostEstimate e;
  const ProjectionCounts pf = projection_counts(f);
  const ProjectionCounts pb = projection_counts(b);
  e.fwd_flops = pf.fwd.flops;
  e.fwd_kernels = pf.fwd.kernels;
  e.bwd_flops = pb.bwd.flops;
  e.bwd_kernels = pb.bwd.kernels;
  return e;
}

TEST(CostSelective, MatchesInstrumentedModel) {
  const ModelConfig cfg{4, 16, 2, 24, 11, 8};
  TargetSet attn;
  for (Target t : {Target::Q, Target::V, Target::Down}) attn.insert(t);
  const std::vector<StrategyConfig> all{
      {FullFT{}, TargetSet::all(), 0, ""},
      {LoraSpec{3, 6, 0}, TargetSet::all(), 0, ""},
      {LoraSpec{2, 6, 0}, attn, 0, ""},
      {PacaSpec{5, std::nullopt}, TargetSet::all(), 0, ""},
      {PacaSpec{0, std::nullopt}, attn, 0, ""},
      {SelectivePacaSpec{0, 0, std::nullopt}, TargetSet::all(), 0, ""},
      {SelectivePacaSpec{1, 4, std::nullopt}, TargetSet::all(), 0, ""},
      {SelectivePacaSpec{3, 0, 2}, attn, 0, ""},
      {SelectivePacaSpec{4, 6, std::nullopt}, TargetSet::all(), 0, ""}};
  for (const StrategyConfig& s : all) {
    const CostEstimate analytic = cost_selective(cfg, s, 2 * 5);
    const CostEstimate measured = instrumented_model(cfg, s, 2, 5);
    EXPECT_EQ(analytic.fwd_flops, measured.fwd_flops) << s.name();
    EXPECT_EQ(analytic.fwd_kernels, measured.fwd_kernels) << s.name();
    EXPECT_EQ(analytic.bwd_flops, measured.bwd_flops) << s.name();
    EXPECT_EQ(analytic.bwd_kernels, measured.bwd_kernels) << s.name();
    EXPECT_EQ(analytic.trainable_params, trainable_params(cfg, s)) << s.name();
  }
}

TEST(CostSelective, AllBlocksEqualsPacaSumMinusLowestInputGradients) {
  const ModelConfig cfg{3, 16, 2, 24, 11, 8};
  const std::int64_t n = 10, m = 4;
  CostEstimate sum;
  for (int i = 0; i < cfg.layers; ++i) {
    for (Target t : kAllTargets) {
      const MatrixShape sh = target_shape(cfg, t);
      sum += cost_paca({sh.d_in, sh.d_out, n}, m);
    }
  }
  const CostEstimate sel = cost_selective(cfg, {SelectivePacaSpec{3, 4, std::nullopt}, TargetSet::all(), 0, ""}, n);
  const CostEstimate paca = cost_selective(cfg, {PacaSpec{4, std::nullopt}, TargetSet::all(), 0, ""}, n);
  // Q, K and V of block 0 read the embedding output, which needs no gradient.
  const std::uint64_t skipped = 3 * mm(16, 16, n);
  EXPECT_EQ(sel.fwd_flops, sum.fwd_flops);
  EXPECT_EQ(sel.bwd_flops, sum.bwd_flops - skipped);
  EXPECT_EQ(sel.bwd_kernels, sum.bwd_kernels - 3);
  EXPECT_EQ(sel.total_flops(), paca.total_flops());
  EXPECT_EQ(sel.total_kernels(), paca.total_kernels());
}

TEST(CostSelective, NoBlocksIsInferenceOnly) {
  const ModelConfig cfg{4, 16, 2, 24, 11, 8};
  const CostEstimate c = cost_selective(cfg, {SelectivePacaSpec{0, 0, std::nullopt}, TargetSet::all(), 0, ""}, 8);
  EXPECT_EQ(c.bwd_flops, 0u);
  EXPECT_EQ(c.bwd_kernels, 0u);
  EXPECT_EQ(c.fwd_kernels, 4u * 7u);
  EXPECT_THROW((void)cost_selective(cfg, {SelectivePacaSpec{5, 2, std::nullopt}, TargetSet::all(), 0, ""}, 8),
               ConfigError);
}

TEST(CostSelective, HalfDepthBeatsLoraAtMatchedBudget) {
  const ModelConfig cfg{12, 512, 8, 1376, 64, 128};
  const StrategyConfig lora{LoraSpec{8, 32, 0}, TargetSet::all(), 0, ""};
  const StrategyConfig sel{SelectivePacaSpec{6, 0, 8}, TargetSet::all(), 0, ""};
  const CostEstimate a = cost_selective(cfg, sel, 8 * 128);
  const CostEstimate b = cost_selective(cfg, lora, 8 * 128);
  EXPECT_LT(a.total_flops(), b.total_flops());
  EXPECT_LT(a.total_kernels(), b.total_kernels());
  EXPECT_NEAR(static_cast<double>(a.trainable_params) / static_cast<double>(b.trainable_params), 1.0, 0.01);
}

TEST(PredictTime, ZeroOverheadIsPureThroughput) {
  const CostEstimate c = cost_lora({300, 200, 7}, 4);
  const PhaseTimes t = predict_time(c, {2.5e9, 0});
  EXPECT_EQ(t.fwd_seconds, static_cast<double>(c.fwd_flops) / 2.5e9);
  EXPECT_EQ(t.bwd_seconds, static_cast<double>(c.bwd_flops) / 2.5e9);
  const CostEstimate p = with_prediction(c, {2.5e9, 0});
  EXPECT_EQ(*p.predicted_fwd_seconds, t.fwd_seconds);
  EXPECT_FALSE(c.predicted_fwd_seconds.has_value());
}

TEST(PredictTime, LoraForwardPenalty) {
  const LayerDims d{256, 256, 16};
  const DeviceProfile prof{1e10, 4e-6};
  const double diff = predict_time(cost_lora(d, 8), prof).fwd_seconds - predict_time(cost_fullft(d), prof).fwd_seconds;
  const double adapter_flops = static_cast<double>(mm(8, 256, 16) + mm(256, 8, 16));
  EXPECT_NEAR(diff, 2 * 4e-6 + adapter_flops / 1e10, 1e-15);
  EXPECT_GT(diff, 0);
}

TEST(PredictTime, StrictlyIncreasingInOverhead) {
  const LayerDims d{64, 32, 4};
  for (const CostEstimate& c : {cost_fullft(d), cost_lora(d, 4), cost_paca(d, 7)}) {
    double prev = -1;
    for (double ov : {0.0, 1e-7, 1e-6, 1e-5, 1e-3}) {
      const PhaseTimes t = predict_time(c, {1e9, ov});
      EXPECT_GT(t.fwd_seconds + t.bwd_seconds, prev);
      prev = t.fwd_seconds + t.bwd_seconds;
    }
  }
  EXPECT_GT(cost_lora(d, 1).fwd_kernels, cost_fullft(d).fwd_kernels);
  EXPECT_GT(cost_lora(d, 1).bwd_kernels, cost_paca(d, 1).bwd_kernels);
}

TEST(Calibration, RecoversKnownProfile) {
  const DeviceProfile truth{3.7e10, 6.5e-6};
  std::vector<CalibrationPoint> pts;
  for (std::int64_t n : {1, 4, 16, 64}) {
    for (const CostEstimate& c : {cost_fullft({128, 128, n}), cost_lora({96, 256, n}, 8)}) {
      pts.push_back(forward_point(c, predict_time(c, truth).fwd_seconds));
      pts.push_back(backward_point(c, predict_time(c, truth).bwd_seconds));
    }
  }
  const DeviceProfile fit = calibrate_profile(pts);
  EXPECT_NEAR(fit.throughput / truth.throughput, 1.0, 1e-9);
  EXPECT_NEAR(fit.launch_overhead / truth.launch_overhead, 1.0, 1e-9);
}

TEST(Calibration, NoisyPointsWithinFivePercent) {
  const DeviceProfile truth{2e10, 1e-5};
  Rng rng(8);
  std::vector<CalibrationPoint> pts;
  for (int i = 0; i < 40; ++i) {
    const std::uint64_t kernels = 1 + rng.uniform_int(400);
    const std::uint64_t flops = (1 + rng.uniform_int(1000)) * 200000;
    const double t = static_cast<double>(kernels) * truth.launch_overhead + static_cast<double>(flops) / truth.throughput;
    pts.push_back({flops, kernels, t * (1 + 0.01 * rng.normal())});
  }
  const DeviceProfile fit = calibrate_profile(pts);
  EXPECT_NEAR(fit.throughput / truth.throughput, 1.0, 0.05);
  EXPECT_NEAR(fit.launch_overhead / truth.launch_overhead, 1.0, 0.05);
}

TEST(Calibration, TwoPointFitReproducesInputs) {
  const ModelConfig cfg{48, 1600, 25, 6400, 50257, 1024};
  const StrategyConfig full{FullFT{}, TargetSet::all(), 0, ""};
  const CostEstimate s512 = cost_selective(cfg, full, 4 * 512);
  const CostEstimate s1024 = cost_selective(cfg, full, 4 * 1024);
  const std::vector<CalibrationPoint> pts{forward_point(s512, 61.89e-3), forward_point(s1024, 118.22e-3)};
  const DeviceProfile fit = calibrate_profile(pts);
  EXPECT_NEAR(predict_time(s512, fit).fwd_seconds / 61.89e-3, 1.0, 0.01);
  EXPECT_NEAR(predict_time(s1024, fit).fwd_seconds / 118.22e-3, 1.0, 0.01);
}

TEST(Calibration, DegenerateInputs) {
  const std::vector<CalibrationPoint> one{{1000, 2, 1e-3}};
  EXPECT_THROW((void)calibrate_profile(one), ContractViolation);
  const std::vector<CalibrationPoint> parallel{{1000, 2, 1e-3}, {2000, 4, 2e-3}};
  try {
    (void)calibrate_profile(parallel);
    FAIL() << "expected a singular-system error";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("2000"), std::string::npos) << e.what();
  }
}

TEST(Crossover, OverheadThresholdExistsBelowBreakEven) {
  for (std::int64_t d_in : {64, 256, 1024}) {
    for (std::int64_t d_out : {64, 512}) {
      const std::int64_t be = lora_break_even_rank(d_in, d_out);
      for (std::int64_t r : {std::int64_t{1}, be / 2, be}) {
        if (r < 1) continue;
        const LayerDims d{d_in, d_out, 8};
        const CostEstimate lora = cost_lora(d, r), full = cost_fullft(d);
        ASSERT_LT(lora.total_flops(), full.total_flops());
        const auto thr = launch_overhead_threshold(lora, full, 1e9);
        ASSERT_TRUE(thr.has_value());
        auto total = [](const CostEstimate& c, double ov) {
          const PhaseTimes t = predict_time(c, {1e9, ov});
          return t.fwd_seconds + t.bwd_seconds;
        };
        EXPECT_LT(total(lora, 0), total(full, 0));
        EXPECT_GT(total(lora, 2 * *thr), total(full, 2 * *thr));
        EXPECT_LT(total(lora, 0.5 * *thr), total(full, 0.5 * *thr));
      }
    }
  }
  EXPECT_FALSE(launch_overhead_threshold(cost_fullft({8, 8, 1}), cost_lora({8, 8, 1}, 1), 1e9).has_value());
}

}  // namespace
}  // namespace peftlab
