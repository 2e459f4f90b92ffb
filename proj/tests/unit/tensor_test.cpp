// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "peftlab/errors.hpp"
#include "peftlab/op_counter.hpp"
#include "peftlab/ops.hpp"
#include "test_support.hpp"

namespace peftlab {
namespace {

using testing::naive_matmul;
using testing::naive_transpose;
using testing::uniform_matrix;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  for (std::size_t n : {1u, 3u, 7u}) {
    const Matrix a = uniform_matrix(rng, 3, n);
    EXPECT_EQ(matmul(Matrix::identity(3), a), a);
  }
}

TEST(Matmul, EqualsNaiveTripleLoopExactly) {
  Rng rng(2);
  const Matrix a = uniform_matrix(rng, 5, 4);
  const Matrix b = uniform_matrix(rng, 4, 3);
  EXPECT_EQ(matmul(a, b), naive_matmul(a, b));
}

TEST(Matmul, TransposedVariantsEqualNaiveProducts) {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t m = 1 + rng.uniform_int(9), k = 1 + rng.uniform_int(9), n = 1 + rng.uniform_int(9);
    const Matrix at = uniform_matrix(rng, k, m);
    const Matrix b = uniform_matrix(rng, k, n);
    const Matrix bt = uniform_matrix(rng, n, k);
    const Matrix a = naive_transpose(at);
    EXPECT_EQ(matmul_tn(at, b), naive_matmul(a, b));
    EXPECT_EQ(matmul_nt(a, bt), naive_matmul(a, naive_transpose(bt)));
  }
}

TEST(Matmul, CountsTwoMknFlopsAndOneKernel) {
  OpCounter c;
  {
    CountingScope scope(c);
    (void)matmul(Matrix(2, 3, 1), Matrix(3, 4, 1), "mm");
  }
  EXPECT_EQ(c.matmul().flops, 48u);
  EXPECT_EQ(c.matmul().kernels, 1u);
  EXPECT_EQ(c.by_tag().at("mm").matmul.flops, 48u);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    (void)matmul(Matrix(2, 3), Matrix(4, 5));
    FAIL() << "expected ContractViolation";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("2x3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("4x5"), std::string::npos);
  }
}

TEST(Matmul, AssociativeWithinTolerance) {
  Rng rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t m = 1 + rng.uniform_int(16), k = 1 + rng.uniform_int(16), n = 1 + rng.uniform_int(16),
                      p = 1 + rng.uniform_int(16);
    const Matrix a = uniform_matrix(rng, m, k), b = uniform_matrix(rng, k, n), c = uniform_matrix(rng, n, p);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    const double scale = static_cast<double>(k * n);
    EXPECT_LE(max_abs_diff(left, right), 1e-10 * scale);
  }
}

TEST(Matmul, ThreadedPathIsBitwiseEqualToSequential) {
  Rng rng(5);
  const Matrix a = uniform_matrix(rng, 300, 200);
  const Matrix b = uniform_matrix(rng, 200, 180);
  const unsigned before = max_threads();
  set_max_threads(1);
  const Matrix seq = matmul(a, b);
  set_max_threads(4);
  const Matrix par = matmul(a, b);
  const Matrix par_tn = matmul_tn(naive_transpose(a), b);
  set_max_threads(before);
  EXPECT_EQ(seq, par);
  EXPECT_EQ(seq, par_tn);
}

TEST(Elementwise, TransposeIsAnInvolution) {
  Rng rng(6);
  const Matrix a = uniform_matrix(rng, 4, 7);
  EXPECT_EQ(transpose(transpose(a)), a);
}

TEST(Elementwise, HadamardWithOnesIsIdentity) {
  Rng rng(7);
  const Matrix a = uniform_matrix(rng, 5, 3);
  EXPECT_EQ(hadamard(a, Matrix(5, 3, 1)), a);
}

TEST(Elementwise, AddingTheNegationGivesZero) {
  Rng rng(8);
  const Matrix a = uniform_matrix(rng, 6, 2);
  EXPECT_EQ(add(a, scale(a, -1)), Matrix(6, 2, 0));
}

TEST(Elementwise, CountedSeparatelyFromMatmul) {
  OpCounter c;
  {
    CountingScope scope(c);
    const Matrix a(3, 4, 1);
    (void)add(a, a);
    (void)scale(a, 2);
    (void)hadamard(a, a);
    (void)transpose(a);
  }
  EXPECT_EQ(c.elementwise().kernels, 4u);
  EXPECT_EQ(c.elementwise().flops, 48u);
  EXPECT_EQ(c.matmul().kernels, 0u);
}

TEST(Elementwise, ShapeMismatchThrows) {
  EXPECT_THROW((void)add(Matrix(2, 2), Matrix(2, 3)), ContractViolation);
  EXPECT_THROW((void)hadamard(Matrix(2, 2), Matrix(3, 2)), ContractViolation);
}

TEST(Counter, TotalsEqualSumOverTagsAndReplayOfLog) {
  Rng rng(9);
  OpCounter c;
  c.set_logging(true);
  std::uint64_t last = 0;
  {
    CountingScope scope(c);
    for (int i = 0; i < 40; ++i) {
      const std::size_t m = 1 + rng.uniform_int(6), k = 1 + rng.uniform_int(6), n = 1 + rng.uniform_int(6);
      const Matrix a = uniform_matrix(rng, m, k), b = uniform_matrix(rng, k, n);
      switch (rng.uniform_int(4)) {
        case 0: (void)matmul(a, b, "x/mm"); break;
        case 1: (void)add(a, a, "x/add"); break;
        case 2: (void)transpose(b, "y/t"); break;
        default: (void)matmul_nt(a, a, "y/mm"); break;
      }
      EXPECT_GE(c.total().flops, last);
      last = c.total().flops;
    }
  }
  OpTally mm, ew;
  for (const auto& [tag, t] : c.by_tag()) {
    mm += t.matmul;
    ew += t.elementwise;
  }
  EXPECT_EQ(mm, c.matmul());
  EXPECT_EQ(ew, c.elementwise());
  OpTally replay;
  for (const OpRecord& r : c.log()) replay += OpTally{r.flops, 1};
  EXPECT_EQ(replay, c.total());
}

TEST(Counter, NestedScopesRestoreTheOuterCounter) {
  OpCounter outer, inner;
  {
    CountingScope a(outer);
    {
      CountingScope b(inner);
      (void)matmul(Matrix(1, 1, 1), Matrix(1, 1, 1));
    }
    (void)matmul(Matrix(1, 1, 1), Matrix(1, 1, 1));
  }
  EXPECT_EQ(inner.matmul().kernels, 1u);
  EXPECT_EQ(outer.matmul().kernels, 1u);
  EXPECT_EQ(active_counter(), nullptr);
}

TEST(Gaussian, ZeroStdGivesExactZeros) {
  Rng rng(10);
  EXPECT_EQ(gaussian_matrix(rng, 4, 5, 0), zero_matrix(4, 5));
}

TEST(Gaussian, SameSeedIsBitwiseIdentical) {
  Rng a(11), b(11);
  EXPECT_EQ(gaussian_matrix(a, 30, 20, 0.7), gaussian_matrix(b, 30, 20, 0.7));
}

TEST(Gaussian, SampleMeanWithinThreeSigma) {
  Rng rng(12);
  const Matrix m = gaussian_matrix(rng, 256, 256, 1);
  double sum = 0, sq = 0;
  for (real_t v : m.values()) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(m.size());
  EXPECT_LT(std::abs(sum / n), 0.02);  // 3 / sqrt(65536) ~ 0.0117
  EXPECT_NEAR(sq / n, 1.0, 0.02);
  EXPECT_TRUE(m.all_finite());
}

TEST(Matrix, RejectsMismatchedDataLength) {
  EXPECT_THROW(Matrix(2, 3, std::vector<real_t>(5)), ContractViolation);
}

}  // namespace
}  // namespace peftlab
