// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/ops.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "peftlab/errors.hpp"
#include "peftlab/op_counter.hpp"

namespace peftlab {

namespace {

std::atomic<unsigned> g_max_threads{1};

// Below this many FLOPs thread start-up dominates.
constexpr std::uint64_t kParallelFlopThreshold = std::uint64_t{1} << 22;

template <typename RowKernel>
void for_rows(std::size_t rows, std::uint64_t flops, RowKernel&& kernel) {
  const unsigned threads = std::min<unsigned>(g_max_threads.load(std::memory_order_relaxed),
                                              static_cast<unsigned>(std::max<std::size_t>(rows, 1)));
  if (threads <= 1 || flops < kParallelFlopThreshold) {
    kernel(std::size_t{0}, rows);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(threads - 1);
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (unsigned t = 1; t < threads; ++t) {
    const std::size_t begin = std::min(rows, t * chunk);
    const std::size_t end = std::min(rows, begin + chunk);
    if (begin < end) pool.emplace_back([&kernel, begin, end] { kernel(begin, end); });
  }
  kernel(std::size_t{0}, std::min(rows, chunk));
}

// c[i, :] = sum_k a[i, k] * b[k, :], k ascending.
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c, std::size_t r0, std::size_t r1) {
  const std::size_t kk = a.cols();
  const std::size_t n = b.cols();
  for (std::size_t i = r0; i < r1; ++i) {
    real_t* crow = c.row(i);
    const real_t* arow = a.row(i);
    for (std::size_t k = 0; k < kk; ++k) {
      const real_t aik = arow[k];
      const real_t* brow = b.row(k);
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c[i, :] = sum_k a[k, i] * b[k, :], k ascending.
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, std::size_t r0, std::size_t r1) {
  const std::size_t kk = a.rows();
  const std::size_t n = b.cols();
  for (std::size_t i = r0; i < r1; ++i) {
    real_t* crow = c.row(i);
    for (std::size_t k = 0; k < kk; ++k) {
      const real_t aki = a(k, i);
      const real_t* brow = b.row(k);
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
}

Matrix raw_transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const real_t* arow = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = arow[j];
  }
  return t;
}

void require_same_shape(const Matrix& a, const Matrix& b, std::string_view op) {
  if (!a.same_shape(b)) {
    throw ContractViolation(
        fmt::format("{}: shape mismatch {} vs {}", op, a.shape_string(), b.shape_string()));
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b, std::string_view tag) {
  if (a.cols() != b.rows()) {
    throw ContractViolation(fmt::format("matmul: inner dimensions disagree for {} * {}",
                                        a.shape_string(), b.shape_string()));
  }
  const auto flops = matmul_flops(a.rows(), a.cols(), b.cols());
  Matrix c(a.rows(), b.cols());
  for_rows(a.rows(), flops, [&](std::size_t r0, std::size_t r1) { gemm_nn(a, b, c, r0, r1); });
  record_op(tag, OpKind::Matmul, flops);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b, std::string_view tag) {
  if (a.rows() != b.rows()) {
    throw ContractViolation(fmt::format("matmul_tn: inner dimensions disagree for ({})^T * {}",
                                        a.shape_string(), b.shape_string()));
  }
  const auto flops = matmul_flops(a.cols(), a.rows(), b.cols());
  Matrix c(a.cols(), b.cols());
  for_rows(a.cols(), flops, [&](std::size_t r0, std::size_t r1) { gemm_tn(a, b, c, r0, r1); });
  record_op(tag, OpKind::Matmul, flops);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b, std::string_view tag) {
  if (a.cols() != b.cols()) {
    throw ContractViolation(fmt::format("matmul_nt: inner dimensions disagree for {} * ({})^T",
                                        a.shape_string(), b.shape_string()));
  }
  const auto flops = matmul_flops(a.rows(), a.cols(), b.rows());
  const Matrix bt = raw_transpose(b);
  Matrix c(a.rows(), b.rows());
  for_rows(a.rows(), flops, [&](std::size_t r0, std::size_t r1) { gemm_nn(a, bt, c, r0, r1); });
  record_op(tag, OpKind::Matmul, flops);
  return c;
}

Matrix transpose(const Matrix& a, std::string_view tag) {
  Matrix t = raw_transpose(a);
  record_op(tag, OpKind::Elementwise, a.size());
  return t;
}

Matrix add(const Matrix& a, const Matrix& b, std::string_view tag) {
  require_same_shape(a, b, "add");
  Matrix c = a;
  auto cv = c.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] += bv[i];
  record_op(tag, OpKind::Elementwise, a.size());
  return c;
}

Matrix scale(const Matrix& a, real_t s, std::string_view tag) {
  Matrix c = a;
  for (real_t& v : c.values()) v *= s;
  record_op(tag, OpKind::Elementwise, a.size());
  return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b, std::string_view tag) {
  require_same_shape(a, b, "hadamard");
  Matrix c = a;
  auto cv = c.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] *= bv[i];
  record_op(tag, OpKind::Elementwise, a.size());
  return c;
}

void add_inplace(Matrix& a, const Matrix& b, std::string_view tag) {
  require_same_shape(a, b, "add_inplace");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  record_op(tag, OpKind::Elementwise, a.size());
}

void scale_inplace(Matrix& a, real_t s, std::string_view tag) {
  for (real_t& v : a.values()) v *= s;
  record_op(tag, OpKind::Elementwise, a.size());
}

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, real_t std) {
  if (!(std >= 0)) throw ContractViolation("gaussian_matrix: std must be >= 0");
  Matrix m(rows, cols);
  for (real_t& v : m.values()) {
    const double z = rng.normal();
    v = std == 0 ? real_t{0} : static_cast<real_t>(std * z);
  }
  return m;
}

Matrix zero_matrix(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

void set_max_threads(unsigned n) noexcept { g_max_threads.store(std::max(1u, n)); }

unsigned max_threads() noexcept { return g_max_threads.load(); }

}  // namespace peftlab
