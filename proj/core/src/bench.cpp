// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/bench.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "peftlab/errors.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/rng.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

namespace {

std::atomic<bool> g_bench_running{false};

struct RunGuard {
  RunGuard() {
    if (g_bench_running.exchange(true)) {
      throw ContractViolation("bench_strategy: another benchmark is already running in this process");
    }
  }
  ~RunGuard() { g_bench_running.store(false); }
  RunGuard(const RunGuard&) = delete;
  RunGuard& operator=(const RunGuard&) = delete;
};

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t at = line.find(sep, start);
    out.push_back(line.substr(start, at == std::string_view::npos ? std::string_view::npos : at - start));
    if (at == std::string_view::npos) break;
    start = at + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view s, std::string_view column) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw SchemaError(fmt::format("bench csv: column {} has malformed value '{}'", column, s));
  }
  return v;
}

double total_median(const BenchRecord& r) { return r.fwd.median_ms + r.bwd.median_ms; }

}  // namespace

PhaseStats to_phase_stats(const SampleStats& s) {
  return {s.median, s.p5, s.p95, s.mean, s.stddev};
}

std::uint64_t bench_memory_bytes(const ModelConfig& cfg, const StrategyConfig& strategy, int batch, int seq) {
  const auto d = static_cast<std::uint64_t>(cfg.d_model);
  const auto f = static_cast<std::uint64_t>(cfg.d_ff);
  const auto v = static_cast<std::uint64_t>(cfg.vocab);
  const auto L = static_cast<std::uint64_t>(cfg.layers);
  const auto nt = static_cast<std::uint64_t>(batch) * static_cast<std::uint64_t>(seq);
  const auto h = static_cast<std::uint64_t>(cfg.n_heads);
  const std::uint64_t weights = 2 * d * v + d + L * (4 * d * d + 3 * d * f + 2 * d);
  // Block cache: x, a1, q, k, v, att, h, a2, output (d each), u, g, s (d_ff
  // each), attention weights, plus the same again for transient gradients.
  const std::uint64_t per_block = 2 * (nt * (9 * d + 3 * f) + static_cast<std::uint64_t>(batch) * h *
                                                                    static_cast<std::uint64_t>(seq) *
                                                                    static_cast<std::uint64_t>(seq));
  const std::uint64_t head = 3 * nt * v + 3 * nt * d;
  const std::uint64_t grads = trainable_params(cfg, strategy) * 2;
  return sizeof(real_t) * (weights + L * per_block + head + grads);
}

BenchRecord bench_strategy(const ModelConfig& cfg, const StrategyConfig& strategy, int batch, int seq,
                           const BenchOptions& o) {
  if (o.timed_iters < 5) throw ContractViolation(fmt::format("bench: timed_iters must be >= 5 (got {})", o.timed_iters));
  if (o.warmup_iters < 0) throw ContractViolation("bench: warmup_iters must be >= 0");
  if (batch < 1 || seq < 1) throw ContractViolation("bench: batch and seq must be >= 1");
  cfg.validate();
  strategy.validate(cfg);
  const std::uint64_t need = bench_memory_bytes(cfg, strategy, batch, seq);
  if (need > o.memory_budget_bytes) {
    throw ResourceError(fmt::format("bench: configuration needs {} bytes, budget is {} bytes", need,
                                    o.memory_budget_bytes),
                        need, o.memory_budget_bytes);
  }
  RunGuard guard;

  TransformerModel model = TransformerModel::random(cfg, o.seed);
  apply_strategy(model, strategy);

  Rng data_rng(derive_seed(o.seed, 0xDA7A));
  TokenBatch tokens{batch, seq, {}};
  tokens.ids.resize(static_cast<std::size_t>(batch) * static_cast<std::size_t>(seq));
  for (int& id : tokens.ids) id = static_cast<int>(data_rng.uniform_int(static_cast<std::uint64_t>(cfg.vocab)));
  const Matrix grad_logits =
      gaussian_matrix(data_rng, static_cast<std::size_t>(cfg.vocab), tokens.ids.size(), 1.0);

  ForwardOptions fo;
  fo.training = true;
  fo.dropout_seed = derive_seed(o.seed, 0xD0);

  BenchRecord rec;
  rec.strategy = strategy.name();
  rec.config_hash = config_hash(cfg);
  rec.d_model = cfg.d_model;
  rec.layers = cfg.layers;
  rec.batch = batch;
  rec.seq = seq;
  rec.iterations = o.timed_iters;
  rec.warmup_iterations = o.warmup_iters;
  rec.trainable_params = trainable_element_count(model);

  {
    OpCounter counter;
    CountingScope scope(counter);
    ForwardResult fr = forward(model, tokens, fo);
    const ProjectionCounts fwd_only = projection_counts(counter);
    if (model.any_trainable()) (void)backward(model, fr.cache, grad_logits);
    const ProjectionCounts both = projection_counts(counter);
    rec.fwd_flops = fwd_only.fwd.flops;
    rec.fwd_kernels = fwd_only.fwd.kernels;
    rec.bwd_flops = both.bwd.flops;
    rec.bwd_kernels = both.bwd.kernels;
  }

  std::vector<double> fwd_s, bwd_s;
  fwd_s.reserve(static_cast<std::size_t>(o.timed_iters));
  bwd_s.reserve(static_cast<std::size_t>(o.timed_iters));
  for (int it = 0; it < o.warmup_iters + o.timed_iters; ++it) {
    auto t0 = std::chrono::steady_clock::now();
    ForwardResult fr = forward(model, tokens, fo);
    const double f_ms = ms_since(t0);
    t0 = std::chrono::steady_clock::now();
    if (model.any_trainable()) {
      GradientSet g = backward(model, fr.cache, grad_logits);
      (void)g;
    }
    const double b_ms = ms_since(t0);
    if (it >= o.warmup_iters) {
      fwd_s.push_back(f_ms);
      bwd_s.push_back(b_ms);
    }
  }
  rec.fwd = to_phase_stats(summarize(fwd_s));
  rec.bwd = to_phase_stats(summarize(bwd_s));
  return rec;
}

std::string bench_csv(std::span<const BenchRecord> records) {
  std::string out(kBenchCsvHeader);
  out += '\n';
  for (const BenchRecord& r : records) {
    out += fmt::format("{},{},{},{},{},{:.3f},{:.3f},{:.3f},{:.3f},{:.3f},{:.3f},{},{},{},{},{}\n", r.strategy,
                       r.d_model, r.layers, r.batch, r.seq, r.fwd.median_ms, r.fwd.p5_ms, r.fwd.p95_ms,
                       r.bwd.median_ms, r.bwd.p5_ms, r.bwd.p95_ms, r.fwd_flops, r.bwd_flops, r.fwd_kernels,
                       r.bwd_kernels, r.trainable_params);
  }
  return out;
}

std::vector<BenchRecord> parse_bench_csv(std::string_view text) {
  std::vector<BenchRecord> out;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kBenchCsvHeader) {
    throw SchemaError("bench csv: header does not match the expected column list");
  }
  const std::vector<std::string_view> names = split(kBenchCsvHeader, ',');
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != names.size()) {
      throw SchemaError(fmt::format("bench csv: row has {} fields, expected {}", f.size(), names.size()));
    }
    BenchRecord r;
    r.strategy = std::string(f[0]);
    r.d_model = parse_number<int>(f[1], names[1]);
    r.layers = parse_number<int>(f[2], names[2]);
    r.batch = parse_number<int>(f[3], names[3]);
    r.seq = parse_number<int>(f[4], names[4]);
    r.fwd.median_ms = parse_number<double>(f[5], names[5]);
    r.fwd.p5_ms = parse_number<double>(f[6], names[6]);
    r.fwd.p95_ms = parse_number<double>(f[7], names[7]);
    r.bwd.median_ms = parse_number<double>(f[8], names[8]);
    r.bwd.p5_ms = parse_number<double>(f[9], names[9]);
    r.bwd.p95_ms = parse_number<double>(f[10], names[10]);
    r.fwd_flops = parse_number<std::uint64_t>(f[11], names[11]);
    r.bwd_flops = parse_number<std::uint64_t>(f[12], names[12]);
    r.fwd_kernels = parse_number<std::uint64_t>(f[13], names[13]);
    r.bwd_kernels = parse_number<std::uint64_t>(f[14], names[14]);
    r.trainable_params = parse_number<std::uint64_t>(f[15], names[15]);
    out.push_back(std::move(r));
  }
  return out;
}

CompareReport compare_report(std::span<const BenchRecord> records, std::string_view baseline) {
  if (records.size() < 2) {
    throw ConfigError(fmt::format("compare_report: need at least 2 records, got {}", records.size()));
  }
  for (const BenchRecord& r : records) {
    if (r.config_hash != records.front().config_hash) {
      std::string hashes;
      for (const BenchRecord& x : records) hashes += fmt::format(" {}={}", x.strategy, x.config_hash);
      throw ConfigError("compare_report: records come from different model configs:" + hashes);
    }
  }
  const auto base_it = std::find_if(records.begin(), records.end(),
                                    [&](const BenchRecord& r) { return r.strategy == baseline; });
  const BenchRecord& base = base_it != records.end() ? *base_it : records.front();

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return total_median(records[a]) < total_median(records[b]);
  });
  std::vector<std::size_t> rank(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = i + 1;

  CompareReport rep;
  rep.csv = "strategy,fwd_median_ms,bwd_median_ms,speedup,flops_delta,kernels_delta,rank\n";
  std::size_t width = 8;
  for (const BenchRecord& r : records) width = std::max(width, r.strategy.size());
  rep.table = fmt::format("{:<{}}  {:>12}  {:>12}  {:>8}  {:>14}  {:>8}  {:>4}\n", "strategy", width, "fwd_ms",
                          "bwd_ms", "speedup", "flops_delta", "kern_d", "rank");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const BenchRecord& r = records[i];
    const double t = total_median(r);
    const double speedup = t > 0 ? total_median(base) / t : 0.0;
    const auto flops_delta = static_cast<std::int64_t>(r.fwd_flops + r.bwd_flops) -
                             static_cast<std::int64_t>(base.fwd_flops + base.bwd_flops);
    const auto kernels_delta = static_cast<std::int64_t>(r.fwd_kernels + r.bwd_kernels) -
                               static_cast<std::int64_t>(base.fwd_kernels + base.bwd_kernels);
    rep.csv += fmt::format("{},{:.3f},{:.3f},{:.2f},{},{},{}\n", r.strategy, r.fwd.median_ms, r.bwd.median_ms,
                           speedup, flops_delta, kernels_delta, rank[i]);
    rep.table += fmt::format("{:<{}}  {:>12.3f}  {:>12.3f}  {:>8.2f}  {:>14}  {:>8}  {:>4}\n", r.strategy, width,
                             r.fwd.median_ms, r.bwd.median_ms, speedup, flops_delta, kernels_delta, rank[i]);
  }
  return rep;
}

}  // namespace peftlab
