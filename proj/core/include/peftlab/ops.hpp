// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string_view>

#include "peftlab/matrix.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

// Every function below is one kernel invocation and records itself into
// the active OpCounter under `tag`. Summation order is fixed (k ascending),
// so results are bitwise reproducible and identical to a naive triple loop.

/// C = A * B. Throws ContractViolation naming both shapes on mismatch.
Matrix matmul(const Matrix& a, const Matrix& b, std::string_view tag = "matmul");
/// C = A^T * B (one kernel; the transpose is folded into the product).
Matrix matmul_tn(const Matrix& a, const Matrix& b, std::string_view tag = "matmul");
/// C = A * B^T (one kernel).
Matrix matmul_nt(const Matrix& a, const Matrix& b, std::string_view tag = "matmul");

Matrix transpose(const Matrix& a, std::string_view tag = "transpose");
Matrix add(const Matrix& a, const Matrix& b, std::string_view tag = "add");
Matrix scale(const Matrix& a, real_t c, std::string_view tag = "scale");
Matrix hadamard(const Matrix& a, const Matrix& b, std::string_view tag = "hadamard");

/// a += b (one elementwise kernel).
void add_inplace(Matrix& a, const Matrix& b, std::string_view tag = "add");
/// a *= c (one elementwise kernel).
void scale_inplace(Matrix& a, real_t c, std::string_view tag = "scale");

/// i.i.d. N(0, std^2) entries drawn row-major from `rng`.
Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, real_t std);
Matrix zero_matrix(std::size_t rows, std::size_t cols);

/// Caps the number of threads a single matmul may use. Row-partitioned
/// parallelism keeps every output entry's summation order, so results are
/// bitwise identical to the sequential path. Default 1.
void set_max_threads(unsigned n) noexcept;
unsigned max_threads() noexcept;

}  // namespace peftlab
