// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "peftlab/errors.hpp"
#include "peftlab/loss.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

void TrainHyper::validate() const {
  auto fail = [](std::string_view field, auto value, std::string_view rule) {
    throw ConfigError(fmt::format("optim.{} = {}: {}", field, value, rule));
  };
  if (batch < 1) fail("batch", batch, "must be >= 1");
  if (grad_accum < 1) fail("grad_accum", grad_accum, "must be >= 1");
  if (epochs < 1) fail("epochs", epochs, "must be >= 1");
  if (max_steps && *max_steps < 1) fail("max_steps", *max_steps, "must be >= 1");
  if (!(lr >= 0) || !std::isfinite(lr)) fail("lr", lr, "must be finite and >= 0");
  if (!(paca_lr >= 0) || !std::isfinite(paca_lr)) fail("paca_lr", paca_lr, "must be finite and >= 0");
  if (warmup_steps < 0) fail("warmup_steps", warmup_steps, "must be >= 0");
  if (!(adamw.beta1 >= 0 && adamw.beta1 < 1)) fail("betas[0]", adamw.beta1, "must lie in [0, 1)");
  if (!(adamw.beta2 >= 0 && adamw.beta2 < 1)) fail("betas[1]", adamw.beta2, "must lie in [0, 1)");
  if (!(adamw.eps > 0)) fail("eps", adamw.eps, "must be > 0");
  if (!(adamw.weight_decay >= 0)) fail("weight_decay", adamw.weight_decay, "must be >= 0");
  if (eval_batch < 1) fail("eval_batch", eval_batch, "must be >= 1");
}

EvalResult evaluate(const LogitsFn& predict, std::span<const Example> val, int eval_batch) {
  if (val.empty()) throw ContractViolation("evaluate: empty validation set");
  if (eval_batch < 1) throw ContractViolation("evaluate: eval_batch must be >= 1");
  double nll = 0;
  int hits = 0;
  int positions = 0;
  for (std::size_t at = 0; at < val.size(); at += static_cast<std::size_t>(eval_batch)) {
    const std::size_t n = std::min(val.size() - at, static_cast<std::size_t>(eval_batch));
    const Batch b = make_batch(val.subspan(at, n));
    const Logits lg = predict(b.tokens);
    const LossResult lr = cross_entropy_loss(lg, b.targets);
    nll += lr.loss * lr.counted;
    positions += lr.counted;
    for (int i = 0; i < b.tokens.batch; ++i) {
      for (int t = 0; t < b.tokens.seq; ++t) {
        const int target = b.targets[static_cast<std::size_t>(i * b.tokens.seq + t)];
        if (target == kIgnoreTarget) continue;
        int best = 0;
        for (int v = 1; v < lg.vocab; ++v) {
          if (lg.at(i, t, v) > lg.at(i, t, best)) best = v;
        }
        hits += best == target ? 1 : 0;
      }
    }
  }
  return {nll / positions, static_cast<double>(hits) / positions, positions};
}

EvalResult evaluate(const TransformerModel& model, std::span<const Example> val, int eval_batch) {
  ForwardOptions opts;
  opts.cache_from = model.config.layers;
  return evaluate([&](const TokenBatch& tb) { return forward(model, tb, opts).logits; }, val, eval_batch);
}

std::int64_t planned_steps(std::size_t train_size, const TrainHyper& h) {
  if (h.max_steps) return *h.max_steps;
  const auto micro = static_cast<std::int64_t>((train_size + static_cast<std::size_t>(h.batch) - 1) /
                                               static_cast<std::size_t>(h.batch));
  const std::int64_t per_epoch = (micro + h.grad_accum - 1) / h.grad_accum;
  return per_epoch * h.epochs;
}

namespace {

bool grads_finite(const GradientSet& g) {
  return std::all_of(g.begin(), g.end(), [](const auto& kv) { return kv.second.all_finite(); });
}

}  // namespace

TrainReport train(TransformerModel& model, const StrategyConfig& strategy, const Dataset& data,
                  const TrainHyper& hyper, std::string_view task_label) {
  hyper.validate();
  strategy.validate(model.config);
  if (data.train.empty() || data.val.empty()) throw ContractViolation("train: empty dataset split");
  apply_strategy(model, strategy);

  TrainReport rep;
  rep.strategy = strategy.name();
  rep.variant = std::string(strategy.variant_name());
  rep.task = std::string(task_label);
  rep.config_hash = config_hash(model.config);
  rep.seed = hyper.seed;
  rep.trainable_params = trainable_element_count(model);

  const EvalResult init = evaluate(model, data.val, hyper.eval_batch);
  rep.initial_val_loss = init.loss;
  rep.initial_val_accuracy = init.accuracy;

  const bool paca = std::holds_alternative<PacaSpec>(strategy.variant) ||
                    std::holds_alternative<SelectivePacaSpec>(strategy.variant);
  const std::int64_t total = planned_steps(data.train.size(), hyper);
  const Schedule sched{paca ? hyper.paca_lr : hyper.lr, std::min(hyper.warmup_steps, total), total};
  AdamW opt(hyper.adamw);
  GradAccumulator acc(hyper.grad_accum);
  const bool trainable = model.any_trainable();

  std::vector<std::size_t> order(data.train.size());
  const auto t0 = std::chrono::steady_clock::now();
  std::int64_t step = 0;
  std::int64_t micro = 0;
  for (std::uint64_t epoch = 0; step < total; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(hyper.seed, 0x5AFF1E, epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle.uniform_int(i)]);
    }
    for (std::size_t at = 0; at < order.size() && step < total; at += static_cast<std::size_t>(hyper.batch)) {
      const std::size_t n = std::min(order.size() - at, static_cast<std::size_t>(hyper.batch));
      std::vector<const Example*> picks;
      for (std::size_t j = 0; j < n; ++j) picks.push_back(&data.train[order[at + j]]);
      const Batch b = make_batch(std::span<const Example* const>(picks));

      ForwardOptions fo;
      fo.training = true;
      fo.dropout_seed = derive_seed(hyper.seed, 0xD0, static_cast<std::uint64_t>(micro));
      ForwardResult fr = forward(model, b.tokens, fo);
      const LossResult lr = cross_entropy_loss(fr.logits, b.targets);
      ++micro;
      if (!std::isfinite(lr.loss)) throw DivergenceError(step);
      rep.last_train_loss = lr.loss;
      if (!trainable) {
        // Nothing to update; each micro-batch still counts toward the schedule.
        if (micro % hyper.grad_accum == 0 || at + n >= order.size()) ++step;
        continue;
      }
      GradientSet g = backward(model, fr.cache, lr.grad_logits);
      if (!grads_finite(g)) throw DivergenceError(step);
      acc.add(g);
      const bool epoch_end = at + n >= order.size();
      if (acc.ready() || epoch_end) {
        adamw_step(opt, model, acc.take_mean(), lr_at(sched, step));
        ++step;
      }
    }
  }
  rep.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rep.steps = step;
  rep.micro_batches = micro;

  const EvalResult fin = evaluate(model, data.val, hyper.eval_batch);
  if (!std::isfinite(fin.loss)) throw DivergenceError(step);
  rep.final_val_loss = fin.loss;
  rep.final_val_accuracy = fin.accuracy;
  spdlog::debug("train {}: {} steps, val loss {:.4f} -> {:.4f}", rep.strategy, rep.steps, rep.initial_val_loss,
                rep.final_val_loss);
  return rep;
}

std::vector<StrategyConfig> default_suite(const ModelConfig& cfg, int lora_rank, std::uint64_t seed,
                                          double lora_alpha, double lora_dropout) {
  const int upper = std::max(1, cfg.layers / 2);
  const int three_q = std::max(1, (3 * cfg.layers) / 4);
  std::vector<StrategyConfig> out;
  out.push_back({SelectivePacaSpec{0, 0, std::nullopt}, TargetSet::all(), seed, "no_tuning"});
  out.push_back({LoraSpec{lora_rank, lora_alpha, lora_dropout}, TargetSet::all(), seed, ""});
  out.push_back({PacaSpec{0, lora_rank}, TargetSet::all(), seed, ""});
  out.push_back({SelectivePacaSpec{upper, 0, lora_rank}, TargetSet::all(), seed, "upper_half_paca"});
  out.push_back({SelectivePacaSpec{three_q, 0, lora_rank}, TargetSet::all(), seed, "three_quarters_paca"});
  return out;
}

}  // namespace peftlab
