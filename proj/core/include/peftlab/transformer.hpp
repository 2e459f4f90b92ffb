// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// LLaMA-style decoder-only transformer (RMSNorm, rotary causal attention,
// SwiGLU MLP, no biases) with hand-written forward and backward passes.
//
// Activations are column-per-token: a batch of N sequences of length T is a
// d x (N*T) matrix whose column n*T + t holds token t of sequence n.
//
// Backward only computes what the trainable set needs. Blocks below the
// lowest trainable block run no backward kernels, and a block's input
// gradient is only formed when something below it is trainable.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/matrix.hpp"
#include "peftlab/model_config.hpp"
#include "peftlab/op_counter.hpp"

namespace peftlab {

enum class Trainability { Frozen, Dense, Adapter, Columns };

struct LinearSlot {
  Matrix weight;  // d_out x d_in
  std::optional<LoraAdapter> lora;
  std::optional<ColumnMask> columns;
  Trainability mode = Trainability::Frozen;
  ProjectionTags tags;

  bool trainable() const noexcept { return mode != Trainability::Frozen; }
};

struct Block {
  Matrix norm1;  // d_model x 1 RMSNorm gains
  Matrix norm2;
  std::array<LinearSlot, kNumTargets> proj;
  bool norms_trainable = false;

  LinearSlot& slot(Target t) noexcept { return proj[static_cast<std::size_t>(t)]; }
  const LinearSlot& slot(Target t) const noexcept { return proj[static_cast<std::size_t>(t)]; }
  bool any_trainable() const noexcept;
};

struct TransformerModel {
  ModelConfig config;
  Matrix embed;       // d_model x vocab, column per token id
  Matrix head;        // vocab x d_model
  Matrix final_norm;  // d_model x 1
  std::vector<Block> blocks;
  bool embed_trainable = false;
  bool head_trainable = false;
  bool final_norm_trainable = false;

  /// Gaussian init N(0, init_std^2) for projections, embedding and head;
  /// norm gains 1.
  static TransformerModel random(const ModelConfig& cfg, std::uint64_t seed, real_t init_std = 0.02);

  /// Lowest block index with any trainable parameter; 0 when the embedding
  /// is trainable; nullopt when nothing below the head is trainable.
  std::optional<int> lowest_trainable_block() const noexcept;
  bool any_trainable() const noexcept;

  /// Every parameter frozen; adapters and masks stay attached.
  void freeze_all() noexcept;
  /// Removes LoRA adapters and column masks; implies freeze_all().
  void clear_adapters() noexcept;
};

/// Name of a slot, e.g. "blk3.Gate".
std::string slot_name(int block, Target t);

struct TokenBatch {
  int batch = 0;
  int seq = 0;
  std::vector<int> ids;  // batch * seq, sequence-major

  int at(int n, int t) const noexcept { return ids[static_cast<std::size_t>(n * seq + t)]; }
};

struct Logits {
  int batch = 0;
  int seq = 0;
  int vocab = 0;
  Matrix values;  // vocab x (batch * seq)

  real_t at(int n, int t, int v) const noexcept {
    return values(static_cast<std::size_t>(v), static_cast<std::size_t>(n * seq + t));
  }
};

struct BlockCache {
  Matrix x;         // block input
  Matrix inv_rms1;  // 1 x NT
  Matrix a1;        // norm1 output
  Matrix q, k, v;   // q, k after rotary embedding
  std::vector<real_t> probs;  // [n][h][t][s] causal attention weights
  Matrix att;
  Matrix h;         // x + O * att
  Matrix inv_rms2;
  Matrix a2;
  Matrix u, g, s;   // Up, Gate outputs and silu(g) * u
  std::array<LoraCache, kNumTargets> lora;
};

struct ActivationCache {
  int first_cached = 0;  // blocks [first_cached, L) are cached
  int batch = 0;
  int seq = 0;
  std::vector<int> tokens;
  std::vector<BlockCache> blocks;  // index i - first_cached
  Matrix final_in;
  Matrix final_inv_rms;
  Matrix final_out;

  bool has_block(int i) const noexcept {
    return i >= first_cached && i - first_cached < static_cast<int>(blocks.size());
  }
};

struct ForwardOptions {
  /// First block whose activations are cached; defaults to the model's
  /// lowest trainable block (L when nothing is trainable).
  std::optional<int> cache_from;
  /// Enables LoRA dropout on trainable adapters.
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

struct ForwardResult {
  Logits logits;
  ActivationCache cache;
};

/// Throws ContractViolation for out-of-range token ids or seq > seq_len.
ForwardResult forward(const TransformerModel& model, const TokenBatch& tokens,
                      const ForwardOptions& opts = {});

/// Trainable-parameter gradients keyed by parameter name.
using GradientSet = std::map<std::string, Matrix, std::less<>>;

/// Gradients for exactly the parameters the model marks trainable.
/// `grad_logits` is vocab x (batch * seq). Throws ContractViolation when a
/// needed block was not cached.
GradientSet backward(const TransformerModel& model, const ActivationCache& cache,
                     const Matrix& grad_logits);

/// Handle to one trainable tensor. For column-tuned weights the logical
/// tensor is d_out x m and entry (r, j) aliases weight(r, S[j]).
struct ParameterRef {
  std::string name;
  Matrix* tensor = nullptr;
  const ColumnMask* columns = nullptr;

  std::size_t rows() const noexcept { return tensor->rows(); }
  std::size_t cols() const noexcept { return columns ? columns->size() : tensor->cols(); }
  std::size_t element_count() const noexcept { return rows() * cols(); }
  real_t& at(std::size_t r, std::size_t c) noexcept {
    return (*tensor)(r, columns ? (*columns)[c] : c);
  }
};

/// Names match the keys backward() emits, in the same order.
std::vector<ParameterRef> trainable_parameters(TransformerModel& model);
std::uint64_t trainable_element_count(const TransformerModel& model);

/// Matmul-only counts over the projection tags ("blk<i>/<Target>/<phase>"),
/// split by phase: fwd vs bwd_w + bwd_x.
struct ProjectionCounts {
  OpTally fwd;
  OpTally bwd;
};
ProjectionCounts projection_counts(const OpCounter& counter);
bool is_projection_tag(std::string_view tag) noexcept;

namespace debug {
/// Test hook: negates every projection weight gradient backward() emits.
void set_backward_sign_flip(bool on) noexcept;
bool backward_sign_flip() noexcept;
}  // namespace debug

}  // namespace peftlab
