// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/workbench/verify.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <json.hpp>

#include "peftlab/adapters.hpp"
#include "peftlab/checkpoint.hpp"
#include "peftlab/cost_model.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/loss.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/rng.hpp"
#include "peftlab/workbench/gradcheck.hpp"

namespace peftlab::workbench {

namespace {

using nlohmann::json;

constexpr ModelConfig kTiny{2, 16, 2, 24, 11, 8};

struct ThreadCap {
  explicit ThreadCap(unsigned n) : previous(max_threads()) { set_max_threads(n); }
  ~ThreadCap() { set_max_threads(previous); }
  unsigned previous;
};

struct SignFlip {
  explicit SignFlip(bool on) : previous(debug::backward_sign_flip()) { debug::set_backward_sign_flip(on); }
  ~SignFlip() { debug::set_backward_sign_flip(previous); }
  bool previous;
};

TokenBatch random_tokens(Rng& rng, int batch, int seq, int vocab) {
  TokenBatch tb{batch, seq, std::vector<int>(static_cast<std::size_t>(batch * seq))};
  for (int& id : tb.ids) id = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
  return tb;
}

std::vector<StrategyConfig> check_strategies(std::uint64_t seed) {
  return {StrategyConfig{FullFT{}, TargetSet::all(), seed, ""},
          StrategyConfig{LoraSpec{2, 4, 0.25}, TargetSet::all(), seed, ""},
          StrategyConfig{PacaSpec{3, std::nullopt}, TargetSet::all(), seed, ""},
          StrategyConfig{SelectivePacaSpec{1, 4, std::nullopt}, TargetSet::all(), seed, ""}};
}

// LoRA B starts at zero, which hides errors in the A gradient.
void perturb_adapters(TransformerModel& m, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xB));
  for (Block& b : m.blocks) {
    for (LinearSlot& s : b.proj) {
      if (s.lora) s.lora->b = gaussian_matrix(rng, s.lora->b.rows(), s.lora->b.cols(), 0.3);
    }
  }
}

void gradient_checks(std::uint64_t seed, std::vector<CheckResult>& out) {
  for (const StrategyConfig& s : check_strategies(seed)) {
    TransformerModel m = TransformerModel::random(kTiny, seed, 0.3);
    apply_strategy(m, s);
    perturb_adapters(m, seed);
    Rng rng(derive_seed(seed, 0x6C));
    const TokenBatch tb = random_tokens(rng, 2, 4, kTiny.vocab);
    std::vector<int> targets(tb.ids.size());
    for (int& t : targets) t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(kTiny.vocab)));
    const GradCheckReport r = gradient_check(m, tb, targets, {1e-5, derive_seed(seed, 0xD)});
    out.push_back({"gradient_check/" + std::string(s.variant_name()), r.max_rel_error < 1e-6, r.max_rel_error,
                   1e-6, fmt::format("{} tensors, worst {}", r.tensors.size(), r.worst_tensor)});
  }
}

void paca_equivalence(std::uint64_t seed, std::vector<CheckResult>& out) {
  Rng rng(derive_seed(seed, 0xEC));
  double worst = 0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t d_in = 1 + rng.uniform_int(24);
    const std::size_t d_out = 1 + rng.uniform_int(24);
    const std::size_t n = 1 + rng.uniform_int(16);
    const Matrix w = gaussian_matrix(rng, d_out, d_in, 1.0);
    const Matrix x = gaussian_matrix(rng, d_in, n, 1.0);
    const Matrix dy = gaussian_matrix(rng, d_out, n, 1.0);
    const ColumnMask mask = select_columns(rng.next_u64(), d_in, rng.uniform_int(d_in + 1));
    const Matrix full = dense_backward(w, x, dy, false, true).grad_w;
    const Matrix cols = paca_grad(w, mask, x, dy);
    worst = std::max(worst, static_cast<double>(max_abs_diff(cols, gather_columns(full, mask))));
  }
  out.push_back({"paca_equivalence", worst <= 1e-12, worst, 1e-12, "100 random cases"});
}

std::uint64_t mismatch(const CostEstimate& e, const OpTally& fwd, const OpTally& bwd) {
  return (e.fwd_flops != fwd.flops) + (e.fwd_kernels != fwd.kernels) + (e.bwd_flops != bwd.flops) +
         (e.bwd_kernels != bwd.kernels);
}

void counter_exactness(std::uint64_t seed, std::vector<CheckResult>& out) {
  Rng rng(derive_seed(seed, 0xC0));
  std::uint64_t bad = 0;
  int cases = 0;
  for (int c = 0; c < 100; ++c) {
    const auto d_in = static_cast<std::int64_t>(1 + rng.uniform_int(20));
    const auto d_out = static_cast<std::int64_t>(1 + rng.uniform_int(20));
    const auto n = static_cast<std::int64_t>(1 + rng.uniform_int(12));
    const auto r = static_cast<int>(1 + rng.uniform_int(8));
    const auto m = static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(d_in) + 1));
    const bool want_x = rng.uniform_int(2) == 1;
    const LayerDims dims{d_in, d_out, n};
    const Matrix w = gaussian_matrix(rng, static_cast<std::size_t>(d_out), static_cast<std::size_t>(d_in), 1.0);
    const Matrix x = gaussian_matrix(rng, static_cast<std::size_t>(d_in), static_cast<std::size_t>(n), 1.0);
    const Matrix dy = gaussian_matrix(rng, static_cast<std::size_t>(d_out), static_cast<std::size_t>(n), 1.0);
    const ProjectionTags tags{"fwd", "bwd_w", "bwd_x"};
    {
      OpCounter f, b;
      { CountingScope s(f); (void)dense_forward(w, x, "fwd"); }
      { CountingScope s(b); (void)dense_backward(w, x, dy, want_x, true, tags); }
      bad += mismatch(cost_fullft(dims, want_x), f.matmul(), b.matmul());
    }
    {
      LoraAdapter ad = LoraAdapter::init(rng, static_cast<int>(d_out), static_cast<int>(d_in), r, 16, 0.1);
      LoraCache cache;
      OpCounter f, b;
      { CountingScope s(f); (void)lora_forward(w, ad, x, &cache, {true, 1}, "fwd"); }
      { CountingScope s(b); (void)lora_backward(w, ad, x, cache, dy, want_x, tags); }
      bad += mismatch(cost_lora(dims, r, want_x), f.matmul(), b.matmul());
    }
    {
      const ColumnMask mask = select_columns(rng.next_u64(), static_cast<std::size_t>(d_in), m);
      OpCounter f, b;
      { CountingScope s(f); (void)dense_forward(w, x, "fwd"); }
      {
        CountingScope s(b);
        (void)paca_grad(w, mask, x, dy, "bwd_w");
        if (want_x) (void)matmul_tn(w, dy, "bwd_x");
      }
      bad += mismatch(cost_paca(dims, static_cast<std::int64_t>(m), want_x), f.matmul(), b.matmul());
    }
    cases += 3;
  }
  // Model level: cost_selective against an instrumented forward/backward.
  for (int c = 0; c < 25; ++c) {
    ModelConfig cfg;
    cfg.layers = 1 + static_cast<int>(rng.uniform_int(3));
    cfg.n_heads = 1 + static_cast<int>(rng.uniform_int(2));
    cfg.d_model = cfg.n_heads * (2 + 2 * static_cast<int>(rng.uniform_int(4)));
    cfg.d_ff = 4 + static_cast<int>(rng.uniform_int(20));
    cfg.vocab = 5 + static_cast<int>(rng.uniform_int(10));
    cfg.seq_len = 8;
    const int batch = 1 + static_cast<int>(rng.uniform_int(2));
    const int seq = 1 + static_cast<int>(rng.uniform_int(8));
    const int k = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.layers) + 1));
    const int r = 1 + static_cast<int>(rng.uniform_int(4));
    const int width = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.d_model) + 1));
    const std::uint64_t s_seed = rng.next_u64();
    TargetSet targets;
    for (Target t : kAllTargets) {
      if (rng.uniform_int(4) != 0) targets.insert(t);
    }
    const std::vector<StrategyConfig> strategies{
        {FullFT{}, targets, s_seed, ""},
        {LoraSpec{r, 8, 0.1}, targets, s_seed, ""},
        {PacaSpec{std::min(width, std::min(cfg.d_model, cfg.d_ff)), std::nullopt}, targets, s_seed, ""},
        {SelectivePacaSpec{k, std::min(width, std::min(cfg.d_model, cfg.d_ff)), std::nullopt}, targets, s_seed, ""}};
    for (const StrategyConfig& s : strategies) {
      TransformerModel m = TransformerModel::random(cfg, s_seed);
      apply_strategy(m, s);
      const TokenBatch tb = random_tokens(rng, batch, seq, cfg.vocab);
      const Matrix gl = gaussian_matrix(rng, static_cast<std::size_t>(cfg.vocab), tb.ids.size(), 1.0);
      OpCounter counter;
      {
        CountingScope scope(counter);
        ForwardOptions fo;
        fo.training = true;
        ForwardResult fr = forward(m, tb, fo);
        (void)backward(m, fr.cache, gl);
      }
      const ProjectionCounts pc = projection_counts(counter);
      bad += mismatch(cost_selective(cfg, s, batch * seq), pc.fwd, pc.bwd);
      ++cases;
    }
  }
  out.push_back({"counter_exactness", bad == 0, static_cast<double>(bad), 0,
                 fmt::format("{} layer and model cases, matmul-only", cases)});
}

void budget_parity(std::vector<CheckResult>& out) {
  const ModelConfig big{32, 4096, 32, 4096, 32000, 512};
  const TargetSet all = TargetSet::all();
  const auto lora = trainable_params(big, {LoraSpec{8, 16, 0.1}, all, 0, ""});
  const auto paca = trainable_params(big, {PacaSpec{16, std::nullopt}, all, 0, ""});
  const auto sel = trainable_params(big, {SelectivePacaSpec{16, 32, std::nullopt}, all, 0, ""});
  TargetSet q;
  q.insert(Target::Q);
  const ModelConfig one{1, 4096, 32, 4096, 32000, 512};
  const auto single_lora = trainable_params(one, {LoraSpec{8, 16, 0.1}, q, 0, ""});
  const auto single_paca = trainable_params(one, {PacaSpec{16, std::nullopt}, q, 0, ""});
  const PacaPreset preset = paca_preset(32, 24, 8);
  const bool ok = lora == paca && paca == sel && single_lora == 65536 && single_paca == 65536 &&
                  match_paca_width(32, 32, 8, 4096, 4096) == 16 && match_paca_width(32, 16, 8, 4096, 4096) == 32 &&
                  match_paca_width(32, 24, 8, 4096, 4096) == 21 && preset.mask_width == 24 &&
                  std::abs(preset.budget_excess - 0.125) < 1e-15;
  out.push_back({"budget_parity", ok, static_cast<double>(lora), static_cast<double>(paca),
                 fmt::format("lora {} paca {} selective {} single {} preset_k24 m={} excess {:+.1f}%", lora, paca, sel,
                             single_lora, preset.mask_width, 100 * preset.budget_excess)});
}

void cost_mechanism(std::vector<CheckResult>& out) {
  const std::int64_t rank = lora_break_even_rank(4096, 4096);
  bool sweep_ok = true;
  for (std::int64_t r = 1; r <= 700; ++r) {
    const LayerDims d{4096, 4096, 1};
    const bool cheaper = cost_lora(d, r).total_flops() < cost_fullft(d).total_flops();
    sweep_ok = sweep_ok && cheaper == (r <= rank);
  }
  out.push_back({"crossover_rank", rank == 682 && sweep_ok, static_cast<double>(rank), 682,
                 "square d=4096, matched against an integer sweep"});

  bool slower = true;
  const LayerDims d{512, 512, 256};
  for (double overhead : {1e-9, 1e-6, 1e-3}) {
    const DeviceProfile p{1e12, overhead};
    slower = slower && predict_time(cost_lora(d, 8), p).fwd_seconds > predict_time(cost_fullft(d), p).fwd_seconds;
  }
  out.push_back({"lora_forward_slower", slower, 0, 0, "launch_overhead in {1e-9, 1e-6, 1e-3} s"});

  const ModelConfig gpt2_xl{48, 1600, 25, 6400, 50257, 1024};
  const StrategyConfig full{FullFT{}, TargetSet::all(), 0, ""};
  const CostEstimate e512 = cost_selective(gpt2_xl, full, 4 * 512);
  const CostEstimate e1024 = cost_selective(gpt2_xl, full, 4 * 1024);
  const std::vector<CalibrationPoint> pts{forward_point(e512, 61.89e-3), forward_point(e1024, 118.22e-3)};
  const DeviceProfile fit = calibrate_profile(pts);
  const double err = std::max(std::abs(predict_time(e512, fit).fwd_seconds / 61.89e-3 - 1),
                              std::abs(predict_time(e1024, fit).fwd_seconds / 118.22e-3 - 1));
  out.push_back({"calibration_gpt2_xl", err < 0.01, err, 0.01,
                 fmt::format("throughput {:.4g} FLOP/s, launch overhead {:.4g} s", fit.throughput, fit.launch_overhead)});
}

void purity_and_determinism(std::uint64_t seed, std::vector<CheckResult>& out) {
  const ModelConfig cfg{3, 16, 2, 24, 11, 8};
  SyntheticTask task{TaskKind::Copy, cfg.vocab, 8, 32, 8, seed};
  const Dataset ds = make_dataset(task);
  TrainHyper h;
  h.batch = 4;
  h.grad_accum = 2;
  h.max_steps = 4;
  h.lr = h.paca_lr = 1e-2;
  h.warmup_steps = 1;
  h.seed = seed;

  const TransformerModel base = TransformerModel::random(cfg, seed);
  std::size_t violations = 0;
  std::string detail;
  auto run = [&](const StrategyConfig& s) {
    TransformerModel m = base;
    TrainReport rep = train(m, s, ds, h);
    return std::pair{std::move(m), rep};
  };

  // Top-K column tuning: changes confined to selected columns of tuned blocks.
  const StrategyConfig sel{SelectivePacaSpec{1, 4, std::nullopt}, TargetSet::all(), seed, ""};
  auto [tuned, rep1] = run(sel);
  std::size_t changed = 0;
  for (const TensorDiff& d : diff_weights(base, tuned)) {
    changed += d.changed;
    bool ok = false;
    for (int i = cfg.layers - 1; i < cfg.layers; ++i) {
      for (Target t : kAllTargets) {
        if (d.name != slot_name(i, t)) continue;
        const auto& cols = tuned.blocks[static_cast<std::size_t>(i)].slot(t).columns->selected();
        ok = std::all_of(d.changed_columns.begin(), d.changed_columns.end(),
                         [&](std::size_t c) { return std::binary_search(cols.begin(), cols.end(), c); });
      }
    }
    if (!ok) {
      ++violations;
      detail += " " + d.name;
    }
  }
  if (changed == 0) {
    ++violations;
    detail += " (no parameter changed)";
  }
  // Adapter tuning never touches base weights.
  const StrategyConfig lora{LoraSpec{2, 4, 0.1}, TargetSet::all(), seed, ""};
  auto [adapted, rep2] = run(lora);
  for (const TensorDiff& d : diff_weights(base, adapted)) {
    ++violations;
    detail += " lora:" + d.name;
  }
  // No tuning: nothing changes and the loss is unchanged.
  const StrategyConfig none{SelectivePacaSpec{0, 0, std::nullopt}, TargetSet::all(), seed, "no_tuning"};
  auto [untouched, rep3] = run(none);
  violations += diff_weights(base, untouched).size();
  if (rep3.final_val_loss != rep3.initial_val_loss) {
    ++violations;
    detail += " no_tuning_loss_changed";
  }
  out.push_back({"frozen_purity", violations == 0, static_cast<double>(violations), 0,
                 violations == 0 ? "selective, lora and no-tuning runs" : "violations:" + detail});

  auto [again, rep1b] = run(sel);
  const bool same = rep1.initial_val_loss == rep1b.initial_val_loss && rep1.final_val_loss == rep1b.final_val_loss &&
                    rep1.last_train_loss == rep1b.last_train_loss && serialize_checkpoint(tuned) == serialize_checkpoint(again);
  Rng rng(derive_seed(seed, 0xDE));
  const TokenBatch tb = random_tokens(rng, 2, 5, cfg.vocab);
  TransformerModel full = base;
  apply_strategy(full, {FullFT{}, TargetSet::all(), seed, ""});
  const Matrix gl = gaussian_matrix(rng, static_cast<std::size_t>(cfg.vocab), tb.ids.size(), 1.0);
  OpCounter c1, c2;
  GradientSet g1, g2;
  {
    CountingScope s(c1);
    g1 = backward(full, forward(full, tb).cache, gl);
  }
  {
    CountingScope s(c2);
    g2 = backward(full, forward(full, tb).cache, gl);
  }
  const bool grads_same = g1 == g2 && c1.total() == c2.total();
  out.push_back({"determinism", same && grads_same, 0, 0, "repeated training, forward and backward are bitwise equal"});
}

void backward_truncation(std::uint64_t seed, std::vector<CheckResult>& out) {
  const ModelConfig cfg{4, 16, 2, 24, 11, 8};
  std::size_t bad = 0;
  for (int k = 1; k <= cfg.layers; ++k) {
    TransformerModel m = TransformerModel::random(cfg, seed);
    apply_strategy(m, {SelectivePacaSpec{k, 3, std::nullopt}, TargetSet::all(), seed, ""});
    Rng rng(derive_seed(seed, 0x7C, static_cast<std::uint64_t>(k)));
    const TokenBatch tb = random_tokens(rng, 1, 6, cfg.vocab);
    const Matrix gl = gaussian_matrix(rng, static_cast<std::size_t>(cfg.vocab), tb.ids.size(), 1.0);
    OpCounter counter;
    {
      CountingScope s(counter);
      ForwardResult fr = forward(m, tb);
      (void)backward(m, fr.cache, gl);
    }
    const int lowest = cfg.layers - k;
    for (const auto& [tag, tally] : counter.by_tag()) {
      if (tag.find("bwd") == std::string::npos || tag.rfind("blk", 0) != 0) continue;
      const int blk = std::stoi(tag.substr(3));
      if (blk < lowest) ++bad;
      if (blk == lowest && (tag.find("/Q/bwd_x") != std::string::npos || tag.find("/K/bwd_x") != std::string::npos ||
                            tag.find("/V/bwd_x") != std::string::npos || tag.find("norm1/bwd_x") != std::string::npos)) {
        ++bad;
      }
    }
  }
  out.push_back({"backward_truncation", bad == 0, static_cast<double>(bad), 0,
                 "no backward entries below the lowest tuned block, no input gradient at it"});
}

}  // namespace

VerifyResult run_verify(const RunConfig& config, const VerifyOptions& options) {
  ThreadCap cap(1);
  SignFlip flip(options.inject_backward_sign);
  const std::uint64_t seed = config.seed;

  VerifyResult res;
  auto guarded = [&](std::string_view name, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      res.checks.push_back({std::string(name), false, 0, 0, std::string("error: ") + e.what()});
    }
  };
  guarded("gradient_check", [&] { gradient_checks(seed, res.checks); });
  guarded("paca_equivalence", [&] { paca_equivalence(seed, res.checks); });
  guarded("counter_exactness", [&] { counter_exactness(seed, res.checks); });
  guarded("budget_parity", [&] { budget_parity(res.checks); });
  guarded("cost_mechanism", [&] { cost_mechanism(res.checks); });
  guarded("frozen_purity", [&] { purity_and_determinism(seed, res.checks); });
  guarded("backward_truncation", [&] { backward_truncation(seed, res.checks); });

  res.passed = std::all_of(res.checks.begin(), res.checks.end(), [](const CheckResult& c) { return c.passed; });
  json checks = json::array();
  for (const CheckResult& c : res.checks) {
    checks.push_back({{"name", c.name},
                      {"passed", c.passed},
                      {"measured", c.measured},
                      {"tolerance", c.tolerance},
                      {"detail", c.detail}});
  }
  const json doc{{"schema_version", 1}, {"kind", "verify"},          {"seed", seed},
                 {"passed", res.passed}, {"fault_injected", options.inject_backward_sign},
                 {"checks", checks}};
  res.json = doc.dump(2) + "\n";
  return res;
}

}  // namespace peftlab::workbench
