// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Binary weight checkpoints.
//
// Layout: the 8 bytes "PEFTCKPT", a little-endian uint64 header length, a
// UTF-8 JSON header, then every tensor as little-endian IEEE-754 binary64
// values in row-major order. The header carries the model config, the
// trainability flags, adapter hyperparameters, column masks and a tensor
// table of (name, rows, cols, byte offset into the data section).

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/transformer.hpp"

namespace peftlab {

inline constexpr int kCheckpointVersion = 1;

std::string serialize_checkpoint(const TransformerModel& model);
/// Throws SchemaError on a malformed or version-mismatched image.
TransformerModel parse_checkpoint(std::string_view bytes);

/// Throws Error when the file cannot be written or read.
void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path);
TransformerModel load_checkpoint(const std::filesystem::path& path);

/// Entries of one named tensor whose bit patterns differ.
struct TensorDiff {
  std::string name;
  std::size_t changed = 0;
  std::vector<std::size_t> changed_columns;  // ascending, unique
};

/// Bitwise comparison of every base tensor (embedding, head, norms and the
/// seven projections of each block). Adapter tensors are ignored. Throws
/// ContractViolation when the models differ in configuration.
std::vector<TensorDiff> diff_weights(const TransformerModel& before, const TransformerModel& after);

}  // namespace peftlab
