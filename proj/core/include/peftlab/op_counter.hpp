// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace peftlab {

/// Matrix products are the only class the analytical cost model accounts
/// for; everything else (adds, norms, softmax, gathers) is Elementwise.
enum class OpKind { Matmul, Elementwise };

struct OpTally {
  std::uint64_t flops = 0;
  std::uint64_t kernels = 0;

  OpTally& operator+=(const OpTally& o) noexcept {
    flops += o.flops;
    kernels += o.kernels;
    return *this;
  }
  friend bool operator==(const OpTally&, const OpTally&) = default;
};

struct TagTally {
  OpTally matmul;
  OpTally elementwise;
};

struct OpRecord {
  std::string tag;
  OpKind kind;
  std::uint64_t flops;
};

/// Counts FLOPs and kernel invocations. Conventions: an (m x k)(k x n)
/// product is 2*m*k*n FLOPs; every primitive tensor op is one kernel.
class OpCounter {
 public:
  void record(std::string_view tag, OpKind kind, std::uint64_t flops);

  OpTally matmul() const noexcept { return matmul_; }
  OpTally elementwise() const noexcept { return elementwise_; }
  OpTally total() const noexcept {
    OpTally t = matmul_;
    t += elementwise_;
    return t;
  }

  const std::map<std::string, TagTally, std::less<>>& by_tag() const noexcept { return tags_; }

  /// Matmul-only tally restricted to tags accepted by `keep`.
  OpTally matmul_where(const std::function<bool(std::string_view)>& keep) const;

  /// When enabled, every record() is also appended to log().
  void set_logging(bool on) noexcept { logging_ = on; }
  const std::vector<OpRecord>& log() const noexcept { return log_; }

  void reset();

 private:
  OpTally matmul_;
  OpTally elementwise_;
  std::map<std::string, TagTally, std::less<>> tags_;
  bool logging_ = false;
  std::vector<OpRecord> log_;
};

/// Installs a counter as the calling thread's active counter for the
/// lifetime of the scope. Scopes nest; the previous counter is restored.
class CountingScope {
 public:
  explicit CountingScope(OpCounter& counter) noexcept;
  ~CountingScope();
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  OpCounter* previous_;
};

OpCounter* active_counter() noexcept;

/// Records into the active counter, if any.
void record_op(std::string_view tag, OpKind kind, std::uint64_t flops);

inline std::uint64_t matmul_flops(std::uint64_t m, std::uint64_t k, std::uint64_t n) noexcept {
  return 2 * m * k * n;
}

}  // namespace peftlab
