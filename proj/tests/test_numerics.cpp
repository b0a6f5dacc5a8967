// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "locomt/numerics.hpp"

using namespace locomt;

TEST(Matmul, SmallProduct) {
  const Tensor c = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5}, {6}}));
  EXPECT_EQ(c, Tensor::matrix({{17}, {39}}));
}

TEST(Matmul, IdentityLeavesInputUnchanged) {
  const Tensor x = Tensor::matrix({{1, -2, 3}, {0.5, 7, -1}});
  EXPECT_EQ(matmul(Tensor::identity(2), x), x);
  EXPECT_EQ(matmul(x, Tensor::identity(3)), x);
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    (void)matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    ASSERT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x3]"), msg.rfind("[2x3]")) << msg;
  }
}

TEST(Matmul, AssociativeOnRandomChains) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const auto k = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const auto p = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const auto q = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const Tensor a = rand_normal(rng, {n, k}), b = rand_normal(rng, {k, p}),
                 c = rand_normal(rng, {p, q});
    const Tensor left = matmul(matmul(a, b), c);
    const Tensor right = matmul(a, matmul(b, c));
    double scale = 1.0;
    for (double v : left.data()) scale = std::max(scale, std::abs(v));
    EXPECT_LE(max_abs_diff(left, right) / scale, 1e-10);
  }
}

TEST(Matmul, CountsTwoMKNIntoActiveScope) {
  FlopCounter outer;
  {
    FlopScope s(outer);
    (void)matmul(Tensor({3, 4}), Tensor({4, 5}), FlopKind::ffn);
    FlopCounter inner;
    {
      FlopScope s2(inner);
      (void)matmul(Tensor({2, 2}), Tensor({2, 2}));
    }
    EXPECT_EQ(inner[FlopKind::other], 16u);
  }
  (void)matmul(Tensor({3, 4}), Tensor({4, 5}));  // no scope: not counted
  EXPECT_EQ(outer[FlopKind::ffn], 120u);
  EXPECT_EQ(outer.total(), 120u);
}

TEST(Tensor, RejectsZeroDimensionsAndBadData) {
  EXPECT_THROW(Tensor({0, 3}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), DimensionError);
  Tensor a({2, 2});
  EXPECT_THROW(a += Tensor({2, 3}), DimensionError);
}

TEST(Tensor, TransposeRoundTrips) {
  const Tensor x = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(transpose(x), Tensor::matrix({{1, 4}, {2, 5}, {3, 6}}));
  EXPECT_EQ(transpose(transpose(x)), x);
}

TEST(Softmax, KnownRow) {
  const Tensor p = softmax_rows(Tensor::matrix({{std::log(1.0), std::log(3.0)}}), Mask(1, 2, true));
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(Softmax, MaskedEntriesAreExactlyZero) {
  Mask m(2, 3);
  m.set(0, 0);
  m.set(0, 2);
  const Tensor p = softmax_rows(Tensor::matrix({{1, 100, 2}, {5, 6, 7}}), m);
  EXPECT_EQ(p(0, 1), 0.0);
  EXPECT_NEAR(p(0, 0) + p(0, 2), 1.0, 1e-15);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p(1, c), 0.0);  // empty row
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = static_cast<std::size_t>(rng.uniform_int(1, 5));
    const auto c = static_cast<std::size_t>(rng.uniform_int(1, 7));
    Tensor a = rand_normal(rng, {r, c}, 10.0);
    Mask m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      m.set(i, static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(c) - 1)));
      for (std::size_t j = 0; j < c; ++j)
        if (rng.uniform() < 0.5) m.set(i, j);
    }
    const Tensor p = softmax_rows(a, m);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(p(i, j), 0.0);
        if (!m(i, j)) {
          EXPECT_EQ(p(i, j), 0.0);
        }
        s += p(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    Tensor shifted = a;
    const double shift = 50.0 * rng.normal();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) shifted(i, j) += shift * static_cast<double>(i + 1);
    EXPECT_LE(max_abs_diff(softmax_rows(shifted, m), p), 1e-12);
  }
}

TEST(Softmax, MaskShapeMismatchThrows) {
  EXPECT_THROW(softmax_rows(Tensor({2, 2}), Mask(2, 3, true)), DimensionError);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_EQ(a.normal(), b.normal());
  }
  EXPECT_NE(Rng::derive(42, 1).next_u64(), Rng::derive(42, 2).next_u64());
}

TEST(Rng, DegenerateIntegerRange) {
  Rng r(1);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(rand_uniform_int(r, 5, 5), 5);
  EXPECT_THROW(r.uniform_int(3, 2), std::invalid_argument);
}

TEST(Rng, NormalMomentsAndFreshDraws) {
  Rng r(2024);
  const Tensor a = rand_normal(r, {1, 100000});
  double mean = 0.0, var = 0.0;
  for (double v : a.data()) mean += v;
  mean /= static_cast<double>(a.size());
  for (double v : a.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(a.size());
  EXPECT_LT(std::abs(mean), 0.02);
  EXPECT_NEAR(var, 1.0, 0.02);
  EXPECT_NE(rand_normal(r, {2, 2}), rand_normal(r, {2, 2}));
}

TEST(Rng, UniformIntCoversRangeEvenly) {
  Rng r(9);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 70000; ++i) ++hist[static_cast<std::size_t>(r.uniform_int(0, 6))];
  for (int h : hist) EXPECT_NEAR(h, 10000, 400);
}
