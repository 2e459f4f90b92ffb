// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace peftlab {

#ifdef PEFTLAB_SINGLE_PRECISION
using real_t = float;
#else
using real_t = double;
#endif

/// Dense row-major matrix. Activations follow the column-per-token layout:
/// an activation block for N tokens of width d is a d x N matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, real_t fill);
  Matrix(std::size_t rows, std::size_t cols, std::vector<real_t> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  real_t& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  real_t operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<real_t> values() noexcept { return data_; }
  std::span<const real_t> values() const noexcept { return data_; }
  real_t* row(std::size_t r) noexcept { return data_.data() + r * cols_; }
  const real_t* row(std::size_t r) const noexcept { return data_.data() + r * cols_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  /// "rows x cols", used in error messages.
  std::string shape_string() const;

  void fill(real_t v);
  bool all_finite() const noexcept;

  /// Bitwise equality of shape and every entry.
  friend bool operator==(const Matrix& a, const Matrix& b) noexcept;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<real_t> data_;
};

/// Largest absolute entry-wise difference; shapes must agree.
real_t max_abs_diff(const Matrix& a, const Matrix& b);
real_t max_abs(const Matrix& a) noexcept;

}  // namespace peftlab
