// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/workbench/run_config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "peftlab/errors.hpp"

namespace peftlab::workbench {

namespace {

using nlohmann::json;

// Collects field-level errors instead of stopping at the first one.
class Reader {
 public:
  void error(const std::string& path, const std::string& msg) { errors_.push_back(path + ": " + msg); }
  const std::vector<std::string>& errors() const { return errors_; }

  bool object(const json& j, const std::string& path, std::initializer_list<std::string_view> keys) {
    if (!j.is_object()) {
      error(path, "must be an object");
      return false;
    }
    const std::set<std::string_view> allowed(keys);
    for (const auto& [k, v] : j.items()) {
      if (!allowed.contains(k)) error(path + "." + k, "unknown key");
    }
    return true;
  }

  template <class T>
  void integer(const json& j, const std::string& path, std::string_view key, T& out, long long lo,
               long long hi = std::numeric_limits<long long>::max()) {
    const auto it = j.find(std::string(key));
    if (it == j.end()) return;
    const std::string p = path + "." + std::string(key);
    if (!it->is_number_integer()) {
      error(p, "must be an integer");
      return;
    }
    const long long v = it->is_number_unsigned() && it->get<unsigned long long>() > static_cast<unsigned long long>(
                                                                                       std::numeric_limits<long long>::max())
                            ? std::numeric_limits<long long>::max()
                            : it->get<long long>();
    if (v < lo || v > hi) {
      error(p, hi == std::numeric_limits<long long>::max() ? fmt::format("must be >= {} (got {})", lo, v)
                                                           : fmt::format("must be in [{}, {}] (got {})", lo, hi, v));
      return;
    }
    out = static_cast<T>(v);
  }

  void unsigned64(const json& j, const std::string& path, std::string_view key, std::uint64_t& out) {
    const auto it = j.find(std::string(key));
    if (it == j.end()) return;
    if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<long long>() >= 0)) {
      error(path + "." + std::string(key), "must be a non-negative integer");
      return;
    }
    out = it->get<std::uint64_t>();
  }

  void real(const json& j, const std::string& path, std::string_view key, double& out,
            const std::function<bool(double)>& ok, std::string_view rule) {
    const auto it = j.find(std::string(key));
    if (it == j.end()) return;
    const std::string p = path + "." + std::string(key);
    if (!it->is_number()) {
      error(p, "must be a number");
      return;
    }
    const double v = it->get<double>();
    if (!ok(v)) {
      error(p, fmt::format("{} (got {})", rule, v));
      return;
    }
    out = v;
  }

  void text(const json& j, const std::string& path, std::string_view key, std::string& out) {
    const auto it = j.find(std::string(key));
    if (it == j.end()) return;
    if (!it->is_string()) {
      error(path + "." + std::string(key), "must be a string");
      return;
    }
    out = it->get<std::string>();
  }

 private:
  std::vector<std::string> errors_;
};

void read_model(Reader& r, const json& j, ModelConfig& m) {
  const std::string p = "model";
  if (!r.object(j, p, {"layers", "d_model", "n_heads", "d_ff", "vocab", "seq_len", "norm_eps", "rope_base"})) return;
  r.integer(j, p, "layers", m.layers, 1, 4096);
  r.integer(j, p, "d_model", m.d_model, 1, 1 << 20);
  r.integer(j, p, "n_heads", m.n_heads, 1, 4096);
  r.integer(j, p, "d_ff", m.d_ff, 1, 1 << 22);
  r.integer(j, p, "vocab", m.vocab, 1, 1 << 24);
  r.integer(j, p, "seq_len", m.seq_len, 1, 1 << 20);
  r.real(j, p, "norm_eps", m.norm_eps, [](double v) { return v > 0; }, "must be > 0");
  r.real(j, p, "rope_base", m.rope_base, [](double v) { return v > 1; }, "must be > 1");
  if (m.d_model % m.n_heads != 0) {
    r.error(p + ".n_heads", fmt::format("must divide d_model ({} % {} != 0)", m.d_model, m.n_heads));
  }
}

std::optional<StrategyConfig> read_strategy(Reader& r, const json& j, const std::string& p,
                                            std::uint64_t default_seed) {
  if (!r.object(j, p, {"variant", "rank", "alpha", "dropout", "mask_width", "k_layers", "match_lora_rank",
                       "target_modules", "seed", "label"})) {
    return std::nullopt;
  }
  StrategyConfig s;
  s.seed = default_seed;
  std::string variant = "full";
  r.text(j, p, "variant", variant);
  r.unsigned64(j, p, "seed", s.seed);
  r.text(j, p, "label", s.label);

  auto forbid = [&](std::initializer_list<std::string_view> keys) {
    for (std::string_view k : keys) {
      if (j.contains(std::string(k))) r.error(p + "." + std::string(k), fmt::format("not used by variant '{}'", variant));
    }
  };
  std::optional<int> match;
  if (j.contains("match_lora_rank")) {
    int m = 0;
    r.integer(j, p, "match_lora_rank", m, 1);
    if (m >= 1) match = m;
  }

  if (variant == "full") {
    forbid({"rank", "alpha", "dropout", "mask_width", "k_layers", "match_lora_rank"});
    s.variant = FullFT{};
  } else if (variant == "lora") {
    forbid({"mask_width", "k_layers", "match_lora_rank"});
    LoraSpec l;
    r.integer(j, p, "rank", l.rank, 1);
    r.real(j, p, "alpha", l.alpha, [](double v) { return v > 0 && std::isfinite(v); }, "must be finite and > 0");
    r.real(j, p, "dropout", l.dropout, [](double v) { return v >= 0 && v < 1; }, "must lie in [0, 1)");
    s.variant = l;
  } else if (variant == "paca") {
    forbid({"rank", "alpha", "dropout", "k_layers"});
    PacaSpec ps;
    r.integer(j, p, "mask_width", ps.mask_width, 0);
    ps.match_lora_rank = match;
    s.variant = ps;
  } else if (variant == "selective_paca") {
    forbid({"rank", "alpha", "dropout"});
    SelectivePacaSpec sp;
    r.integer(j, p, "k_layers", sp.k_layers, 0);
    r.integer(j, p, "mask_width", sp.mask_width, 0);
    sp.match_lora_rank = match;
    s.variant = sp;
  } else {
    r.error(p + ".variant", fmt::format("must be one of full, lora, paca, selective_paca (got '{}')", variant));
    return std::nullopt;
  }

  if (const auto it = j.find("target_modules"); it != j.end()) {
    if (!it->is_array()) {
      r.error(p + ".target_modules", "must be an array of module names");
    } else {
      TargetSet set;
      for (std::size_t i = 0; i < it->size(); ++i) {
        const json& e = (*it)[i];
        const auto t = e.is_string() ? parse_target(e.get<std::string>()) : std::nullopt;
        if (!t) {
          r.error(fmt::format("{}.target_modules[{}]", p, i), "must be one of Q, K, V, O, Up, Down, Gate");
          continue;
        }
        set.insert(*t);
      }
      s.targets = set;
    }
  }
  return s;
}

void read_optim(Reader& r, const json& j, TrainHyper& h) {
  const std::string p = "optim";
  if (!r.object(j, p, {"lr", "paca_lr", "warmup_steps", "epochs", "max_steps", "grad_accum", "batch",
                       "weight_decay", "betas", "eps", "eval_batch"})) {
    return;
  }
  auto nonneg = [](double v) { return v >= 0 && std::isfinite(v); };
  r.real(j, p, "lr", h.lr, nonneg, "must be finite and >= 0");
  h.paca_lr = h.lr;
  r.real(j, p, "paca_lr", h.paca_lr, nonneg, "must be finite and >= 0");
  r.integer(j, p, "warmup_steps", h.warmup_steps, 0);
  r.integer(j, p, "epochs", h.epochs, 1);
  if (j.contains("max_steps") && !j.at("max_steps").is_null()) {
    std::int64_t steps = 0;
    r.integer(j, p, "max_steps", steps, 1);
    if (steps >= 1) h.max_steps = steps;
  }
  r.integer(j, p, "grad_accum", h.grad_accum, 1);
  r.integer(j, p, "batch", h.batch, 1);
  r.integer(j, p, "eval_batch", h.eval_batch, 1);
  r.real(j, p, "weight_decay", h.adamw.weight_decay, nonneg, "must be finite and >= 0");
  r.real(j, p, "eps", h.adamw.eps, [](double v) { return v > 0; }, "must be > 0");
  if (const auto it = j.find("betas"); it != j.end()) {
    if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number() || !(*it)[1].is_number()) {
      r.error(p + ".betas", "must be an array of two numbers");
    } else {
      const double b1 = (*it)[0].get<double>();
      const double b2 = (*it)[1].get<double>();
      if (!(b1 >= 0 && b1 < 1)) r.error(p + ".betas[0]", fmt::format("must lie in [0, 1) (got {})", b1));
      if (!(b2 >= 0 && b2 < 1)) r.error(p + ".betas[1]", fmt::format("must lie in [0, 1) (got {})", b2));
      h.adamw.beta1 = b1;
      h.adamw.beta2 = b2;
    }
  }
}

void read_bench(Reader& r, const json& j, BenchSection& b) {
  const std::string p = "bench";
  if (!r.object(j, p, {"batch", "seq", "warmup_iters", "timed_iters", "memory_budget_mb"})) return;
  r.integer(j, p, "batch", b.batch, 1);
  r.integer(j, p, "seq", b.seq, 1);
  r.integer(j, p, "warmup_iters", b.options.warmup_iters, 0);
  r.integer(j, p, "timed_iters", b.options.timed_iters, 5);
  std::uint64_t mb = b.options.memory_budget_bytes >> 20;
  r.unsigned64(j, p, "memory_budget_mb", mb);
  b.options.memory_budget_bytes = mb << 20;
}

void read_task(Reader& r, const json& j, SyntheticTask& t) {
  const std::string p = "task";
  if (!r.object(j, p, {"kind", "seq_len", "train_size", "val_size", "seed"})) return;
  std::string kind(task_name(t.kind));
  r.text(j, p, "kind", kind);
  if (const auto k = parse_task_kind(kind)) {
    t.kind = *k;
  } else {
    r.error(p + ".kind", fmt::format("must be one of copy, reverse, modular_sum (got '{}')", kind));
  }
  r.integer(j, p, "seq_len", t.seq_len, 2);
  r.integer(j, p, "train_size", t.train_size, 1);
  r.integer(j, p, "val_size", t.val_size, 1);
  r.unsigned64(j, p, "seed", t.seed);
}

void read_device(Reader& r, const json& j, DeviceProfile& d) {
  const std::string p = "device";
  if (!r.object(j, p, {"throughput", "launch_overhead"})) return;
  r.real(j, p, "throughput", d.throughput, [](double v) { return v > 0 && std::isfinite(v); }, "must be > 0");
  r.real(j, p, "launch_overhead", d.launch_overhead, [](double v) { return v >= 0 && std::isfinite(v); },
         "must be >= 0");
}

[[noreturn]] void raise(const std::vector<std::string>& errors) {
  std::string msg = "invalid run config:";
  for (const std::string& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

void finish(RunConfig& rc, Reader& r) {
  try {
    rc.model.validate();
  } catch (const ConfigError& e) {
    r.error("model", e.what());
  }
  for (std::size_t i = 0; i < rc.strategies.size() && r.errors().empty(); ++i) {
    try {
      rc.strategies[i].validate(rc.model);
    } catch (const ConfigError& e) {
      r.error(fmt::format("strategies[{}]", i), e.what());
    }
  }
  try {
    rc.optim.validate();
  } catch (const ConfigError& e) {
    r.error("optim", e.what());
  }
  try {
    rc.task.validate();
  } catch (const ConfigError& e) {
    r.error("task", e.what());
  }
  if (rc.task.vocab > rc.model.vocab) {
    r.error("task", fmt::format("task vocab {} exceeds model.vocab {}", rc.task.vocab, rc.model.vocab));
  }
  if (rc.task.seq_len > rc.model.seq_len) {
    r.error("task.seq_len", fmt::format("{} exceeds model.seq_len {}", rc.task.seq_len, rc.model.seq_len));
  }
  if (rc.bench.seq > rc.model.seq_len) {
    r.error("bench.seq", fmt::format("{} exceeds model.seq_len {}", rc.bench.seq, rc.model.seq_len));
  }
  if (!r.errors().empty()) raise(r.errors());
}

std::vector<StrategyConfig> default_strategies(const ModelConfig& cfg, std::uint64_t seed) {
  std::vector<StrategyConfig> out{StrategyConfig{FullFT{}, TargetSet::all(), seed, ""}};
  for (StrategyConfig& s : default_suite(cfg, 8, seed)) out.push_back(std::move(s));
  return out;
}

}  // namespace

RunConfig parse_run_config(std::string_view text, std::optional<std::uint64_t> seed_override) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("invalid run config: not valid JSON ({})", e.what()));
  }
  Reader r;
  RunConfig rc;
  if (!r.object(j, "$", {"seed", "output_dir", "model", "strategy", "strategies", "optim", "bench", "task",
                         "device"})) {
    raise(r.errors());
  }
  r.unsigned64(j, "$", "seed", rc.seed);
  if (seed_override) rc.seed = *seed_override;
  r.text(j, "$", "output_dir", rc.output_dir);
  rc.task.seed = rc.seed;
  rc.optim.seed = rc.seed;

  if (j.contains("model")) read_model(r, j.at("model"), rc.model);
  rc.task.vocab = rc.model.vocab;
  rc.task.seq_len = rc.model.seq_len - rc.model.seq_len % 2;
  rc.bench.seq = rc.model.seq_len;
  if (j.contains("optim")) read_optim(r, j.at("optim"), rc.optim);
  if (j.contains("bench")) read_bench(r, j.at("bench"), rc.bench);
  if (j.contains("task")) read_task(r, j.at("task"), rc.task);
  if (seed_override) rc.task.seed = *seed_override;
  if (j.contains("device")) read_device(r, j.at("device"), rc.device);

  if (j.contains("strategies")) {
    const json& arr = j.at("strategies");
    if (!arr.is_array() || arr.empty()) {
      r.error("strategies", "must be a non-empty array");
    } else {
      for (std::size_t i = 0; i < arr.size(); ++i) {
        if (auto s = read_strategy(r, arr[i], fmt::format("strategies[{}]", i), rc.seed)) {
          rc.strategies.push_back(std::move(*s));
        }
      }
    }
  }
  if (j.contains("strategy")) {
    if (auto s = read_strategy(r, j.at("strategy"), "strategy", rc.seed)) {
      rc.strategies.insert(rc.strategies.begin(), std::move(*s));
    }
  }
  if (!r.errors().empty()) raise(r.errors());
  if (rc.strategies.empty()) rc.strategies = default_strategies(rc.model, rc.seed);
  finish(rc, r);
  return rc;
}

RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config '{}'", path));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), seed_override);
}

RunConfig default_run_config(std::optional<std::uint64_t> seed_override) {
  return parse_run_config("{}", seed_override);
}

}  // namespace peftlab::workbench
