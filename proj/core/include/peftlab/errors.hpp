// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace peftlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (shape mismatch, index out of
/// range, invalid mask, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Invalid or unknown configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A run was refused because it would exceed a resource budget.
class ResourceError : public Error {
 public:
  ResourceError(const std::string& what, std::uint64_t required_bytes, std::uint64_t budget_bytes)
      : Error(what), required_bytes_(required_bytes), budget_bytes_(budget_bytes) {}

  std::uint64_t required_bytes() const noexcept { return required_bytes_; }
  std::uint64_t budget_bytes() const noexcept { return budget_bytes_; }

 private:
  std::uint64_t required_bytes_;
  std::uint64_t budget_bytes_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(std::int64_t step);
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

/// A serialized artifact has an unexpected schema or version.
class SchemaError : public Error {
 public:
  using Error::Error;
};

}  // namespace peftlab
