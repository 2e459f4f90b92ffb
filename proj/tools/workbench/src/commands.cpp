// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/workbench/commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "peftlab/bench.hpp"
#include "peftlab/checkpoint.hpp"
#include "peftlab/cost_model.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/train.hpp"

namespace peftlab::workbench {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(fmt::format("cannot write '{}'", path.string()));
  f << text;
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(fmt::format("cannot read '{}'", path.string()));
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json estimate_json(const CostEstimate& e) {
  json j{{"fwd_flops", e.fwd_flops},     {"bwd_flops", e.bwd_flops},
         {"fwd_kernels", e.fwd_kernels}, {"bwd_kernels", e.bwd_kernels},
         {"trainable_params", e.trainable_params}};
  if (e.predicted_fwd_seconds) j["predicted_fwd_seconds"] = *e.predicted_fwd_seconds;
  if (e.predicted_bwd_seconds) j["predicted_bwd_seconds"] = *e.predicted_bwd_seconds;
  return j;
}

std::int64_t signed_delta(std::uint64_t a, std::uint64_t b) {
  return static_cast<std::int64_t>(a) - static_cast<std::int64_t>(b);
}

// Soft check: selective (K = L/2) < PaCA < LoRA in the given metric.
void log_ordering(const std::vector<std::pair<std::string, double>>& rows, std::ostream& out) {
  auto find = [&](std::string_view name) -> std::optional<double> {
    for (const auto& [n, v] : rows) {
      if (n == name) return v;
    }
    return std::nullopt;
  };
  const auto upper = find("upper_half_paca");
  const auto three = find("three_quarters_paca");
  const auto paca = find("paca_match_r8");
  const auto lora = find("lora_r8");
  if (!upper || !paca || !lora) return;
  bool ok = *upper < *paca && *paca < *lora;
  if (three) ok = ok && *upper < *three && *three < *paca;
  if (ok) {
    out << "ordering: upper_half < three_quarters < paca < lora holds\n";
  } else {
    spdlog::warn("ordering upper_half < three_quarters < paca < lora does not hold on this machine");
    out << "ordering: WARN upper_half < three_quarters < paca < lora does not hold\n";
  }
}

void apply_thread_env() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PEFTLAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(v));
  }
  set_max_threads(n);
}

}  // namespace

int cmd_estimate(const RunConfig& rc, std::ostream& out) {
  const std::int64_t tokens = static_cast<std::int64_t>(rc.bench.batch) * rc.bench.seq;
  const StrategyConfig full{FullFT{}, TargetSet::all(), rc.seed, ""};
  const CostEstimate base = with_prediction(cost_selective(rc.model, full, tokens), rc.device);
  const double base_time = *base.predicted_fwd_seconds + *base.predicted_bwd_seconds;

  json rows = json::array();
  for (const StrategyConfig& s : rc.strategies) {
    const CostEstimate e = with_prediction(cost_selective(rc.model, s, tokens), rc.device);
    json j = estimate_json(e);
    j["strategy"] = s.name();
    j["variant"] = s.variant_name();
    j["delta_vs_full"] = {
        {"flops", signed_delta(e.total_flops(), base.total_flops())},
        {"kernels", signed_delta(e.total_kernels(), base.total_kernels())},
        {"trainable_params", signed_delta(e.trainable_params, base.trainable_params)},
        {"predicted_seconds", *e.predicted_fwd_seconds + *e.predicted_bwd_seconds - base_time}};
    const auto threshold = launch_overhead_threshold(e, base, rc.device.throughput);
    j["launch_overhead_threshold_seconds"] = threshold ? json(*threshold) : json(nullptr);
    rows.push_back(std::move(j));
  }

  json crossover = json::array();
  const std::int64_t d = rc.model.d_model;
  const std::int64_t f = rc.model.d_ff;
  for (auto [name, d_in, d_out] : {std::tuple{"attention", d, d}, std::tuple{"mlp_up_gate", d, f},
                                   std::tuple{"mlp_down", f, d}}) {
    crossover.push_back(
        {{"matrix", name}, {"d_in", d_in}, {"d_out", d_out}, {"break_even_rank", lora_break_even_rank(d_in, d_out)}});
  }

  const json doc{{"schema_version", kReportSchemaVersion},
                 {"kind", "estimate"},
                 {"config_hash", config_hash(rc.model)},
                 {"seed", rc.seed},
                 {"tokens", tokens},
                 {"device", {{"throughput", rc.device.throughput}, {"launch_overhead", rc.device.launch_overhead}}},
                 {"full_ft", estimate_json(base)},
                 {"strategies", rows},
                 {"crossover", crossover}};
  const std::string text = doc.dump(2) + "\n";
  write_file(fs::path(rc.output_dir) / "estimate.json", text);
  out << text;
  return kExitOk;
}

int cmd_bench(const RunConfig& rc, std::ostream& out) {
  BenchOptions opts = rc.bench.options;
  opts.seed = rc.seed;
  std::vector<BenchRecord> records;
  for (const StrategyConfig& s : rc.strategies) {
    records.push_back(bench_strategy(rc.model, s, rc.bench.batch, rc.bench.seq, opts));
    spdlog::info("bench {}: fwd {:.3f} ms, bwd {:.3f} ms", records.back().strategy, records.back().fwd.median_ms,
                 records.back().bwd.median_ms);
  }
  const fs::path csv_path = fs::path(rc.output_dir) / "bench.csv";
  write_file(csv_path, bench_csv(records));
  if (records.size() >= 2) out << compare_report(records).table;
  std::vector<std::pair<std::string, double>> rows;
  for (const BenchRecord& r : records) rows.emplace_back(r.strategy, r.fwd.median_ms + r.bwd.median_ms);
  log_ordering(rows, out);
  out << csv_path.string() << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& rc, std::ostream& out) {
  const Dataset data = make_dataset(rc.task);
  json reports = json::array();
  std::vector<std::pair<std::string, double>> rows;
  const fs::path dir(rc.output_dir);
  for (const StrategyConfig& s : rc.strategies) {
    TransformerModel model = TransformerModel::random(rc.model, rc.seed);
    const TrainReport r = train(model, s, data, rc.optim, task_name(rc.task.kind));
    fs::create_directories(dir / "checkpoints");
    save_checkpoint(model, dir / "checkpoints" / (r.strategy + ".ckpt"));
    out << fmt::format("{:<24} loss {:.4f} -> {:.4f}  acc {:.3f}  {:.2f} s\n", r.strategy, r.initial_val_loss,
                       r.final_val_loss, r.final_val_accuracy, r.train_seconds);
    rows.emplace_back(r.strategy, r.train_seconds);
    reports.push_back({{"strategy", r.strategy},
                       {"variant", r.variant},
                       {"task", r.task},
                       {"config_hash", r.config_hash},
                       {"seed", r.seed},
                       {"trainable_params", r.trainable_params},
                       {"steps", r.steps},
                       {"micro_batches", r.micro_batches},
                       {"train_seconds", r.train_seconds},
                       {"initial_val_loss", r.initial_val_loss},
                       {"final_val_loss", r.final_val_loss},
                       {"initial_val_accuracy", r.initial_val_accuracy},
                       {"final_val_accuracy", r.final_val_accuracy},
                       {"last_train_loss", r.last_train_loss}});
  }
  log_ordering(rows, out);
  const json doc{{"schema_version", kReportSchemaVersion},
                 {"kind", "train"},
                 {"config_hash", config_hash(rc.model)},
                 {"seed", rc.seed},
                 {"reports", reports}};
  const fs::path path = dir / "train_report.json";
  write_file(path, doc.dump(2) + "\n");
  out << path.string() << "\n";
  return kExitOk;
}

int cmd_verify(const RunConfig& rc, const VerifyOptions& options, std::ostream& out, std::ostream& err) {
  const VerifyResult res = run_verify(rc, options);
  write_file(fs::path(rc.output_dir) / "verify.json", res.json);
  out << res.json;
  if (res.passed) return kExitOk;
  int listed = 0;
  for (const CheckResult& c : res.checks) {
    if (c.passed) continue;
    if (listed++ == 10) break;
    err << fmt::format("FAIL {}: measured {} tolerance {} ({})\n", c.name, c.measured, c.tolerance, c.detail);
  }
  return kExitVerifyFailed;
}

int cmd_report(const std::vector<std::string>& inputs, std::ostream& out) {
  if (inputs.empty()) throw ConfigError("report: at least one input file is required");
  std::vector<BenchRecord> bench;
  std::vector<json> trains;
  for (const std::string& path : inputs) {
    const std::string text = read_file(path);
    if (fs::path(path).extension() == ".csv") {
      for (BenchRecord& r : parse_bench_csv(text)) bench.push_back(std::move(r));
      continue;
    }
    json doc;
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw SchemaError(fmt::format("report: '{}' is neither a bench CSV nor JSON ({})", path, e.what()));
    }
    if (!doc.is_object() || !doc.contains("schema_version") || !doc["schema_version"].is_number_integer() ||
        doc["schema_version"].get<int>() != kReportSchemaVersion) {
      throw SchemaError(fmt::format("report: '{}' has schema_version {}, expected {}", path,
                                    doc.is_object() && doc.contains("schema_version") ? doc["schema_version"].dump()
                                                                                       : std::string("(missing)"),
                                    kReportSchemaVersion));
    }
    if (doc.value("kind", "") != "train" || !doc.contains("reports") || !doc["reports"].is_array()) {
      throw SchemaError(fmt::format("report: '{}' is not a train report", path));
    }
    for (const json& r : doc["reports"]) trains.push_back(r);
  }

  try {
    if (!bench.empty()) {
      const auto base_it = std::find_if(bench.begin(), bench.end(), [](const BenchRecord& r) { return r.strategy == "full"; });
      const BenchRecord& base = base_it != bench.end() ? *base_it : bench.front();
      const double base_t = base.fwd.median_ms + base.bwd.median_ms;
      out << fmt::format("## Step time (baseline: {})\n\n", base.strategy);
      out << "| strategy | fwd median ms | bwd median ms | total ms | speedup | FLOPs | kernels | trainable params |\n";
      out << "|---|---:|---:|---:|---:|---:|---:|---:|\n";
      for (const BenchRecord& r : bench) {
        const double t = r.fwd.median_ms + r.bwd.median_ms;
        out << fmt::format("| {} | {:.3f} | {:.3f} | {:.3f} | {:.2f} | {} | {} | {} |\n", r.strategy, r.fwd.median_ms,
                           r.bwd.median_ms, t, t > 0 ? base_t / t : 0.0, r.fwd_flops + r.bwd_flops,
                           r.fwd_kernels + r.bwd_kernels, r.trainable_params);
      }
      out << "\n";
    }
    if (!trains.empty()) {
      const std::string hash = trains.front().at("config_hash").get<std::string>();
      for (const json& r : trains) {
        if (r.at("config_hash").get<std::string>() != hash) {
          throw ConfigError(fmt::format("report: train reports mix model configs ({} vs {})", hash,
                                        r.at("config_hash").get<std::string>()));
        }
      }
      auto base_it = std::find_if(trains.begin(), trains.end(), [](const json& r) { return r.at("variant") == "full"; });
      if (base_it == trains.end()) {
        base_it = std::find_if(trains.begin(), trains.end(), [](const json& r) { return r.at("variant") == "lora"; });
      }
      const json& base = base_it != trains.end() ? *base_it : trains.front();
      const double base_t = base.at("train_seconds").get<double>();
      out << fmt::format("## Training (baseline: {}, config {})\n\n", base.at("strategy").get<std::string>(), hash);
      out << "| strategy | training time s | vs baseline | initial val loss | final val loss | val accuracy | trainable params |\n";
      out << "|---|---:|---:|---:|---:|---:|---:|\n";
      for (const json& r : trains) {
        const double t = r.at("train_seconds").get<double>();
        out << fmt::format("| {} | {:.2f} | {:+.1f}% | {:.4f} | {:.4f} | {:.3f} | {} |\n",
                           r.at("strategy").get<std::string>(), t, base_t > 0 ? 100 * (t / base_t - 1) : 0.0,
                           r.at("initial_val_loss").get<double>(), r.at("final_val_loss").get<double>(),
                           r.at("final_val_accuracy").get<double>(), r.at("trainable_params").get<std::uint64_t>());
      }
    }
  } catch (const json::exception& e) {
    throw SchemaError(fmt::format("report: malformed train report ({})", e.what()));
  }
  return kExitOk;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"peftlab: fine-tuning cost and timing workbench", "peftlab"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--seed", seed, "Global seed (overrides the config)");
    sub->add_option("--out", out_dir, "Output directory (overrides the config)");
  };
  CLI::App* estimate = app.add_subcommand("estimate", "Analytical FLOP/kernel report per strategy");
  CLI::App* bench = app.add_subcommand("bench", "Wall-clock forward/backward benchmark per strategy");
  CLI::App* train_cmd = app.add_subcommand("train", "Train every configured strategy on the synthetic task");
  CLI::App* verify = app.add_subcommand("verify", "Run the oracle suite");
  CLI::App* report = app.add_subcommand("report", "Merge bench CSVs and train reports into markdown");
  for (CLI::App* s : {estimate, bench, train_cmd, verify, report}) add_common(s);
  std::string fault;
  verify->add_option("--inject-fault", fault)->group("")->check(CLI::IsMember({"backward_sign"}));
  std::vector<std::string> inputs;
  report->add_option("inputs", inputs, "bench CSV or train report JSON files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (report->parsed()) return cmd_report(inputs, out);
    RunConfig rc = config_path.empty() ? default_run_config(seed) : load_run_config(config_path, seed);
    if (!out_dir.empty()) rc.output_dir = out_dir;
    apply_thread_env();
    if (estimate->parsed()) return cmd_estimate(rc, out);
    if (bench->parsed()) return cmd_bench(rc, out);
    if (train_cmd->parsed()) return cmd_train(rc, out);
    return cmd_verify(rc, VerifyOptions{fault == "backward_sign"}, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ResourceError& e) {
    err << "resource error: " << e.what() << "\n";
    return kExitResource;
  } catch (const DivergenceError& e) {
    err << fmt::format("divergence at step {}: {}\n", e.step(), e.what());
    return kExitDivergence;
  } catch (const SchemaError& e) {
    err << "schema error: " << e.what() << "\n";
    return kExitSchema;
  } catch (const ContractViolation& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitVerifyFailed;
  }
}

}  // namespace peftlab::workbench
