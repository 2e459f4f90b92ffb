// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "peftlab/errors.hpp"

namespace peftlab {

Matrix::Matrix(std::size_t rows, std::size_t cols) : Matrix(rows, cols, real_t{0}) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, real_t fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<real_t> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ContractViolation(fmt::format("matrix data length {} does not match shape {}x{}",
                                        data_.size(), rows, cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1;
  return m;
}

std::string Matrix::shape_string() const { return fmt::format("{}x{}", rows_, cols_); }

void Matrix::fill(real_t v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](real_t v) { return std::isfinite(v); });
}

bool operator==(const Matrix& a, const Matrix& b) noexcept {
  if (!a.same_shape(b)) return false;
  if (a.data_.empty()) return true;
  return std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(real_t)) == 0;
}

real_t max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ContractViolation(
        fmt::format("max_abs_diff shape mismatch: {} vs {}", a.shape_string(), b.shape_string()));
  }
  real_t m = 0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

real_t max_abs(const Matrix& a) noexcept {
  real_t m = 0;
  for (real_t v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace peftlab
