// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/adapters.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>

#include "peftlab/errors.hpp"
#include "peftlab/op_counter.hpp"
#include "peftlab/ops.hpp"

namespace peftlab {

Matrix dense_forward(const Matrix& w, const Matrix& x, std::string_view tag) {
  return matmul(w, x, tag);
}

DenseGrads dense_backward(const Matrix& w, const Matrix& x, const Matrix& grad_y, bool want_input,
                          bool want_weight, const ProjectionTags& tags) {
  DenseGrads g;
  if (want_weight) g.grad_w = matmul_nt(grad_y, x, tags.bwd_w);
  if (want_input) g.grad_x = matmul_tn(w, grad_y, tags.bwd_x);
  return g;
}

LoraAdapter LoraAdapter::init(Rng& rng, int d_out, int d_in, int rank, real_t alpha,
                              real_t dropout, real_t init_std) {
  if (rank < 1) throw ContractViolation(fmt::format("LoRA rank must be >= 1 (got {})", rank));
  if (!(dropout >= 0 && dropout < 1)) {
    throw ContractViolation(fmt::format("LoRA dropout must be in [0, 1) (got {})", dropout));
  }
  LoraAdapter ad;
  ad.a = gaussian_matrix(rng, static_cast<std::size_t>(rank), static_cast<std::size_t>(d_in), init_std);
  ad.b = zero_matrix(static_cast<std::size_t>(d_out), static_cast<std::size_t>(rank));
  ad.rank = rank;
  ad.alpha = alpha;
  ad.dropout = dropout;
  return ad;
}

namespace {

void check_adapter(const Matrix& w, const LoraAdapter& ad, const Matrix& x) {
  const auto r = static_cast<std::size_t>(ad.rank);
  if (ad.a.rows() != r || ad.a.cols() != w.cols() || ad.b.rows() != w.rows() || ad.b.cols() != r) {
    throw ContractViolation(fmt::format("LoRA adapter A {} / B {} incompatible with W {} at rank {}",
                                        ad.a.shape_string(), ad.b.shape_string(),
                                        w.shape_string(), ad.rank));
  }
  if (x.rows() != w.cols()) {
    throw ContractViolation(
        fmt::format("LoRA input {} incompatible with W {}", x.shape_string(), w.shape_string()));
  }
}

Matrix make_dropout_scale(std::size_t rows, std::size_t cols, real_t p, std::uint64_t seed) {
  Rng rng(seed);
  Matrix s(rows, cols);
  const real_t keep = static_cast<real_t>(1) / (1 - p);
  for (real_t& v : s.values()) v = rng.uniform() >= p ? keep : real_t{0};
  return s;
}

}  // namespace

Matrix lora_forward(const Matrix& w, const LoraAdapter& adapter, const Matrix& x_in,
                    LoraCache* cache, const LoraForwardOptions& opts, std::string_view tag) {
  check_adapter(w, adapter, x_in);
  Matrix out = matmul(w, x_in, tag);
  Matrix dropout_scale;
  Matrix mid;
  if (opts.training && adapter.dropout > 0) {
    dropout_scale = make_dropout_scale(x_in.rows(), x_in.cols(), adapter.dropout, opts.dropout_seed);
    mid = matmul(adapter.a, hadamard(x_in, dropout_scale, tag), tag);
  } else {
    mid = matmul(adapter.a, x_in, tag);
  }
  Matrix branch = matmul(adapter.b, mid, tag);
  scale_inplace(branch, adapter.scaling(), tag);
  add_inplace(out, branch, tag);
  if (cache != nullptr) {
    cache->x_mid = std::move(mid);
    cache->dropout_scale = std::move(dropout_scale);
  }
  return out;
}

LoraGrads lora_backward(const Matrix& w, const LoraAdapter& adapter, const Matrix& x_in,
                        const LoraCache& cache, const Matrix& grad_y, bool want_input,
                        const ProjectionTags& tags) {
  check_adapter(w, adapter, x_in);
  if (cache.x_mid.rows() != static_cast<std::size_t>(adapter.rank) ||
      cache.x_mid.cols() != x_in.cols()) {
    throw ContractViolation(fmt::format("lora_backward: missing or stale X_mid cache ({} for input {})",
                                        cache.x_mid.shape_string(), x_in.shape_string()));
  }
  if (grad_y.rows() != w.rows() || grad_y.cols() != x_in.cols()) {
    throw ContractViolation(fmt::format("lora_backward: grad_y {} incompatible with W {} and input {}",
                                        grad_y.shape_string(), w.shape_string(), x_in.shape_string()));
  }
  const real_t s = adapter.scaling();
  const bool dropped = !cache.dropout_scale.empty();

  LoraGrads g;
  // grad_mid = s * B^T dY
  Matrix grad_mid = matmul_tn(adapter.b, grad_y, tags.bwd_w);
  scale_inplace(grad_mid, s, tags.bwd_w);
  // grad_B = s * dY X_mid^T
  g.grad_b = matmul_nt(grad_y, cache.x_mid, tags.bwd_w);
  scale_inplace(g.grad_b, s, tags.bwd_w);
  // grad_A = grad_mid * dropout(X_in)^T
  g.grad_a = dropped ? matmul_nt(grad_mid, hadamard(x_in, cache.dropout_scale, tags.bwd_w), tags.bwd_w)
                     : matmul_nt(grad_mid, x_in, tags.bwd_w);
  if (want_input) {
    g.grad_x = matmul_tn(w, grad_y, tags.bwd_x);
    Matrix adapter_term = matmul_tn(adapter.a, grad_mid, tags.bwd_x);
    if (dropped) adapter_term = hadamard(adapter_term, cache.dropout_scale, tags.bwd_x);
    add_inplace(g.grad_x, adapter_term, tags.bwd_x);
  }
  return g;
}

Matrix merge_lora(const Matrix& w, const LoraAdapter& adapter) {
  Matrix delta = matmul(adapter.b, adapter.a, "merge");
  scale_inplace(delta, adapter.scaling(), "merge");
  return add(w, delta, "merge");
}

ColumnMask::ColumnMask(std::vector<std::size_t> selected, std::size_t d_in)
    : selected_(std::move(selected)), d_in_(d_in) {
  for (std::size_t j = 0; j < selected_.size(); ++j) {
    if (selected_[j] >= d_in_) {
      throw ContractViolation(
          fmt::format("column mask index {} out of range for d_in {}", selected_[j], d_in_));
    }
    if (j > 0 && selected_[j] <= selected_[j - 1]) {
      throw ContractViolation("column mask indices must be strictly increasing");
    }
  }
}

ColumnMask ColumnMask::all(std::size_t d_in) {
  std::vector<std::size_t> idx(d_in);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return ColumnMask(std::move(idx), d_in);
}

ColumnMask select_columns(std::uint64_t seed, std::size_t d_in, std::size_t m) {
  if (m > d_in) {
    throw ContractViolation(fmt::format("select_columns: m = {} exceeds d_in = {}", m, d_in));
  }
  std::vector<std::size_t> pool(d_in);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_int(d_in - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  std::sort(pool.begin(), pool.end());
  return ColumnMask(std::move(pool), d_in);
}

namespace {
void check_mask(const Matrix& w, const ColumnMask& mask, std::string_view op) {
  if (mask.d_in() != w.cols()) {
    throw ContractViolation(fmt::format("{}: mask built for d_in {} but W is {}", op, mask.d_in(),
                                        w.shape_string()));
  }
}
}  // namespace

Matrix gather_columns(const Matrix& w, const ColumnMask& mask) {
  check_mask(w, mask, "gather_columns");
  Matrix out(w.rows(), mask.size());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t j = 0; j < mask.size(); ++j) out(r, j) = w(r, mask[j]);
  }
  return out;
}

void scatter_columns(Matrix& w, const ColumnMask& mask, const Matrix& values) {
  check_mask(w, mask, "scatter_columns");
  if (values.rows() != w.rows() || values.cols() != mask.size()) {
    throw ContractViolation(fmt::format("scatter_columns: values {} do not fit W {} with m = {}",
                                        values.shape_string(), w.shape_string(), mask.size()));
  }
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t j = 0; j < mask.size(); ++j) w(r, mask[j]) = values(r, j);
  }
}

Matrix paca_grad(const Matrix& w, const ColumnMask& mask, const Matrix& x_in, const Matrix& grad_y,
                 std::string_view tag) {
  check_mask(w, mask, "paca_grad");
  if (x_in.rows() != w.cols() || grad_y.rows() != w.rows() || x_in.cols() != grad_y.cols()) {
    throw ContractViolation(fmt::format("paca_grad: X {} / dY {} incompatible with W {}",
                                        x_in.shape_string(), grad_y.shape_string(), w.shape_string()));
  }
  if (mask.size() == 0) return Matrix(w.rows(), 0);
  // Rows S of X_in, then dY * X_S^T as a single product.
  Matrix xs(mask.size(), x_in.cols());
  for (std::size_t j = 0; j < mask.size(); ++j) {
    std::copy_n(x_in.row(mask[j]), x_in.cols(), xs.row(j));
  }
  return matmul_nt(grad_y, xs, tag);
}

ColumnUpdateRule sgd_rule(real_t eta) {
  return [eta](Matrix& values, const Matrix& grad) {
    auto v = values.values();
    auto g = grad.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= eta * g[i];
  };
}

void paca_apply(Matrix& w, const ColumnMask& mask, const Matrix& grad_cols,
                const ColumnUpdateRule& rule) {
  check_mask(w, mask, "paca_apply");
  if (grad_cols.rows() != w.rows() || grad_cols.cols() != mask.size()) {
    throw ContractViolation(fmt::format("paca_apply: gradient {} does not match W {} with m = {}",
                                        grad_cols.shape_string(), w.shape_string(), mask.size()));
  }
  if (mask.size() == 0) return;
  Matrix cols = gather_columns(w, mask);
  rule(cols, grad_cols);
  scatter_columns(w, mask, cols);
}

}  // namespace peftlab
