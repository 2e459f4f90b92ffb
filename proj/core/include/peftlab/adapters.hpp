// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Per-layer building blocks of the tuning strategies: the dense path, the
// LoRA adapter branch and partial-column (PaCA) gradients/updates. Each
// function records its kernels under the caller's tag so that model-level
// counts decompose per projection matrix.

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/matrix.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

/// Tags for the three phases of one projection: forward, weight-side
/// backward and input-gradient backward.
struct ProjectionTags {
  std::string fwd = "fwd";
  std::string bwd_w = "bwd_w";
  std::string bwd_x = "bwd_x";
};

// ---------------------------------------------------------------- dense

Matrix dense_forward(const Matrix& w, const Matrix& x, std::string_view tag);

struct DenseGrads {
  Matrix grad_x;  // empty unless requested
  Matrix grad_w;  // empty unless requested
};
/// grad_w = dY X^T, grad_x = W^T dY; each one kernel when requested.
DenseGrads dense_backward(const Matrix& w, const Matrix& x, const Matrix& grad_y, bool want_input,
                          bool want_weight, const ProjectionTags& tags = {});

// ----------------------------------------------------------------- LoRA

/// Low-rank adapter: delta W = (alpha / rank) * B * A with A: rank x d_in and
/// B: d_out x rank.
struct LoraAdapter {
  Matrix a;
  Matrix b;
  int rank = 0;
  real_t alpha = 0;
  real_t dropout = 0;

  real_t scaling() const noexcept { return alpha / static_cast<real_t>(rank); }

  /// A ~ N(0, init_std^2), B = 0, so the adapter starts as an exact no-op.
  static LoraAdapter init(Rng& rng, int d_out, int d_in, int rank, real_t alpha, real_t dropout,
                          real_t init_std = 0.02);
};

struct LoraCache {
  Matrix x_mid;           // A * dropout(X_in)
  Matrix dropout_scale;   // per-entry multiplier (0 or 1/(1-p)); empty without dropout
};

struct LoraForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

/// X_out = W X_in + (alpha/r) * B (A dropout(X_in)). Three matmul kernels.
Matrix lora_forward(const Matrix& w, const LoraAdapter& adapter, const Matrix& x_in,
                    LoraCache* cache = nullptr, const LoraForwardOptions& opts = {},
                    std::string_view tag = "lora");

struct LoraGrads {
  Matrix grad_x;  // empty unless requested
  Matrix grad_a;
  Matrix grad_b;
};

/// Backward through lora_forward. Five matmul kernels with the input
/// gradient, three without. Throws ContractViolation when the cache does
/// not hold X_mid for this input.
LoraGrads lora_backward(const Matrix& w, const LoraAdapter& adapter, const Matrix& x_in,
                        const LoraCache& cache, const Matrix& grad_y, bool want_input = true,
                        const ProjectionTags& tags = {});

/// W + (alpha/r) B A.
Matrix merge_lora(const Matrix& w, const LoraAdapter& adapter);

// ----------------------------------------------------------------- PaCA

/// Set of selected input columns of a weight matrix, strictly increasing.
class ColumnMask {
 public:
  ColumnMask() = default;
  /// Throws ContractViolation unless indices are strictly increasing and < d_in.
  ColumnMask(std::vector<std::size_t> selected, std::size_t d_in);
  static ColumnMask all(std::size_t d_in);

  std::size_t size() const noexcept { return selected_.size(); }
  std::size_t d_in() const noexcept { return d_in_; }
  const std::vector<std::size_t>& selected() const noexcept { return selected_; }
  std::size_t operator[](std::size_t j) const noexcept { return selected_[j]; }

  friend bool operator==(const ColumnMask&, const ColumnMask&) = default;

 private:
  std::vector<std::size_t> selected_;
  std::size_t d_in_ = 0;
};

/// m distinct columns drawn uniformly without replacement (partial
/// Fisher-Yates over Rng(seed)), returned sorted.
ColumnMask select_columns(std::uint64_t seed, std::size_t d_in, std::size_t m);

/// Full-FT weight gradient restricted to the selected columns:
/// out[:, j] = dY * X[S[j], :]^T. One kernel of 2*N*d_out*m FLOPs; no kernel
/// at all when the mask is empty.
Matrix paca_grad(const Matrix& w, const ColumnMask& mask, const Matrix& x_in,
                 const Matrix& grad_y, std::string_view tag = "paca");

/// Update rule applied to the gathered selected columns in place.
using ColumnUpdateRule = std::function<void(Matrix& values, const Matrix& grad)>;

/// values -= eta * grad
ColumnUpdateRule sgd_rule(real_t eta);

/// Gathers the selected columns of `w`, applies `rule`, scatters them
/// back. Entries outside the mask are never written.
void paca_apply(Matrix& w, const ColumnMask& mask, const Matrix& grad_cols,
                const ColumnUpdateRule& rule);

Matrix gather_columns(const Matrix& w, const ColumnMask& mask);
void scatter_columns(Matrix& w, const ColumnMask& mask, const Matrix& values);

}  // namespace peftlab
