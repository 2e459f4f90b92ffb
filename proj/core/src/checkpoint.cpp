// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <iterator>

#include <fmt/format.h>
#include <json.hpp>

#include "peftlab/errors.hpp"

namespace peftlab {

namespace {

using nlohmann::json;

constexpr std::string_view kMagic = "PEFTCKPT";

std::string_view mode_name(Trainability m) {
  switch (m) {
    case Trainability::Frozen: return "frozen";
    case Trainability::Dense: return "dense";
    case Trainability::Adapter: return "adapter";
    case Trainability::Columns: return "columns";
  }
  return "frozen";
}

Trainability parse_mode(const std::string& s) {
  if (s == "frozen") return Trainability::Frozen;
  if (s == "dense") return Trainability::Dense;
  if (s == "adapter") return Trainability::Adapter;
  if (s == "columns") return Trainability::Columns;
  throw SchemaError(fmt::format("checkpoint: unknown slot mode '{}'", s));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return v;
}

// Visits every tensor in a fixed order; the callback receives the name and
// a mutable or const reference depending on the model's constness.
template <class Model, class F>
void for_each_tensor(Model& model, F&& f) {
  f(std::string("embed"), model.embed);
  f(std::string("head"), model.head);
  f(std::string("final_norm"), model.final_norm);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    auto& blk = model.blocks[i];
    const auto b = fmt::format("blk{}", i);
    f(b + ".norm1", blk.norm1);
    f(b + ".norm2", blk.norm2);
    for (Target t : kAllTargets) {
      auto& slot = blk.slot(t);
      const auto n = slot_name(static_cast<int>(i), t);
      f(n, slot.weight);
      if (slot.lora) {
        f(n + ".lora_A", slot.lora->a);
        f(n + ".lora_B", slot.lora->b);
      }
    }
  }
}

json config_json(const ModelConfig& c) {
  return json{{"layers", c.layers},     {"d_model", c.d_model},   {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},         {"vocab", c.vocab},       {"seq_len", c.seq_len},
              {"norm_eps", c.norm_eps}, {"rope_base", c.rope_base}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.seq_len = j.at("seq_len").get<int>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.rope_base = j.at("rope_base").get<double>();
  return c;
}

}  // namespace

std::string serialize_checkpoint(const TransformerModel& model) {
  json header;
  header["format"] = "peftlab-checkpoint";
  header["version"] = kCheckpointVersion;
  header["config"] = config_json(model.config);
  header["config_hash"] = config_hash(model.config);
  header["trainable"] = {{"embed", model.embed_trainable},
                         {"head", model.head_trainable},
                         {"final_norm", model.final_norm_trainable}};
  json slots = json::array();
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const Block& blk = model.blocks[i];
    json jb{{"norms_trainable", blk.norms_trainable}};
    for (Target t : kAllTargets) {
      const LinearSlot& s = blk.slot(t);
      json js{{"mode", mode_name(s.mode)}};
      if (s.lora) {
        js["lora"] = {{"rank", s.lora->rank},
                      {"alpha", static_cast<double>(s.lora->alpha)},
                      {"dropout", static_cast<double>(s.lora->dropout)}};
      }
      if (s.columns) {
        js["columns"] = s.columns->selected();
        js["columns_d_in"] = s.columns->d_in();
      }
      jb[std::string(target_name(t))] = std::move(js);
    }
    slots.push_back(std::move(jb));
  }
  header["blocks"] = std::move(slots);

  json table = json::array();
  std::uint64_t offset = 0;
  for_each_tensor(model, [&](const std::string& name, const Matrix& m) {
    table.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += 8 * m.size();
  });
  header["tensors"] = std::move(table);

  const std::string text = header.dump();
  std::string out;
  out.reserve(kMagic.size() + 8 + text.size() + offset);
  out.append(kMagic);
  put_u64(out, text.size());
  out.append(text);
  for_each_tensor(model, [&](const std::string&, const Matrix& m) {
    for (real_t v : m.values()) put_u64(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  });
  return out;
}

TransformerModel parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic) {
    throw SchemaError("checkpoint: missing PEFTCKPT magic");
  }
  const std::uint64_t hlen = get_u64(bytes, kMagic.size());
  const std::size_t data_at = kMagic.size() + 8 + hlen;
  if (hlen > bytes.size() || data_at > bytes.size()) throw SchemaError("checkpoint: truncated header");

  json header;
  try {
    header = json::parse(bytes.substr(kMagic.size() + 8, hlen));
  } catch (const json::exception& e) {
    throw SchemaError(fmt::format("checkpoint: header is not valid JSON ({})", e.what()));
  }

  try {
    if (header.at("format").get<std::string>() != "peftlab-checkpoint") {
      throw SchemaError("checkpoint: unexpected format tag");
    }
    const int version = header.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw SchemaError(fmt::format("checkpoint: version {} not supported (expected {})", version,
                                    kCheckpointVersion));
    }
    const ModelConfig cfg = config_from(header.at("config"));
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      throw SchemaError(fmt::format("checkpoint: invalid config ({})", e.what()));
    }

    TransformerModel model = TransformerModel::random(cfg, 0, 0);
    const json& tr = header.at("trainable");
    model.embed_trainable = tr.at("embed").get<bool>();
    model.head_trainable = tr.at("head").get<bool>();
    model.final_norm_trainable = tr.at("final_norm").get<bool>();

    const json& blocks = header.at("blocks");
    if (blocks.size() != model.blocks.size()) throw SchemaError("checkpoint: block count mismatch");
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
      Block& blk = model.blocks[i];
      blk.norms_trainable = blocks[i].at("norms_trainable").get<bool>();
      for (Target t : kAllTargets) {
        const json& js = blocks[i].at(std::string(target_name(t)));
        LinearSlot& s = blk.slot(t);
        s.mode = parse_mode(js.at("mode").get<std::string>());
        if (js.contains("lora")) {
          const json& jl = js.at("lora");
          LoraAdapter ad;
          ad.rank = jl.at("rank").get<int>();
          ad.alpha = static_cast<real_t>(jl.at("alpha").get<double>());
          ad.dropout = static_cast<real_t>(jl.at("dropout").get<double>());
          s.lora = std::move(ad);
        }
        if (js.contains("columns")) {
          try {
            s.columns = ColumnMask(js.at("columns").get<std::vector<std::size_t>>(),
                                   js.at("columns_d_in").get<std::size_t>());
          } catch (const ContractViolation& e) {
            throw SchemaError(fmt::format("checkpoint: invalid column mask ({})", e.what()));
          }
        }
      }
    }

    // Shapes come from the table; tensors are then filled in table order.
    std::map<std::string, json> entries;
    for (const json& e : header.at("tensors")) entries[e.at("name").get<std::string>()] = e;
    const std::string_view data = bytes.substr(data_at);
    std::size_t seen = 0;
    for_each_tensor(model, [&](const std::string& name, Matrix& m) {
      const auto it = entries.find(name);
      if (it == entries.end()) throw SchemaError(fmt::format("checkpoint: tensor '{}' missing", name));
      const auto rows = it->second.at("rows").get<std::size_t>();
      const auto cols = it->second.at("cols").get<std::size_t>();
      const auto off = it->second.at("offset").get<std::uint64_t>();
      if (off + 8 * rows * cols > data.size()) {
        throw SchemaError(fmt::format("checkpoint: tensor '{}' extends past end of data", name));
      }
      Matrix loaded(rows, cols);
      auto vals = loaded.values();
      for (std::size_t k = 0; k < vals.size(); ++k) {
        vals[k] = static_cast<real_t>(std::bit_cast<double>(get_u64(data, off + 8 * k)));
      }
      m = std::move(loaded);
      ++seen;
    });
    if (seen != entries.size()) throw SchemaError("checkpoint: tensor table has unexpected entries");

    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
      for (Target t : kAllTargets) {
        const LinearSlot& s = model.blocks[i].slot(t);
        const MatrixShape sh = target_shape(cfg, t);
        if (s.weight.rows() != static_cast<std::size_t>(sh.d_out) ||
            s.weight.cols() != static_cast<std::size_t>(sh.d_in)) {
          throw SchemaError(fmt::format("checkpoint: {} has shape {}", slot_name(static_cast<int>(i), t),
                                        s.weight.shape_string()));
        }
      }
    }
    return model;
  } catch (const json::exception& e) {
    throw SchemaError(fmt::format("checkpoint: malformed header ({})", e.what()));
  }
}

void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(fmt::format("cannot open '{}' for writing", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(fmt::format("failed writing '{}'", path.string()));
}

TransformerModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open '{}' for reading", path.string()));
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

std::vector<TensorDiff> diff_weights(const TransformerModel& before, const TransformerModel& after) {
  if (!(before.config == after.config)) throw ContractViolation("diff_weights: model configs differ");
  std::vector<std::pair<std::string, const Matrix*>> lhs;
  std::vector<const Matrix*> rhs;
  auto collect = [](const TransformerModel& m, auto&& sink) {
    sink("embed", m.embed);
    sink("head", m.head);
    sink("final_norm", m.final_norm);
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
      sink(fmt::format("blk{}.norm1", i), m.blocks[i].norm1);
      sink(fmt::format("blk{}.norm2", i), m.blocks[i].norm2);
      for (Target t : kAllTargets) sink(slot_name(static_cast<int>(i), t), m.blocks[i].slot(t).weight);
    }
  };
  collect(before, [&](std::string name, const Matrix& m) { lhs.emplace_back(std::move(name), &m); });
  collect(after, [&](const std::string&, const Matrix& m) { rhs.push_back(&m); });

  std::vector<TensorDiff> out;
  for (std::size_t k = 0; k < lhs.size(); ++k) {
    const Matrix& a = *lhs[k].second;
    const Matrix& b = *rhs[k];
    if (!a.same_shape(b)) throw ContractViolation(fmt::format("diff_weights: '{}' changed shape", lhs[k].first));
    TensorDiff d{lhs[k].first, 0, {}};
    std::vector<bool> col(a.cols(), false);
    for (std::size_t r = 0; r < a.rows(); ++r) {
      for (std::size_t c = 0; c < a.cols(); ++c) {
        if (std::bit_cast<std::uint64_t>(static_cast<double>(a(r, c))) !=
            std::bit_cast<std::uint64_t>(static_cast<double>(b(r, c)))) {
          ++d.changed;
          col[c] = true;
        }
      }
    }
    if (d.changed == 0) continue;
    for (std::size_t c = 0; c < col.size(); ++c) {
      if (col[c]) d.changed_columns.push_back(c);
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace peftlab
