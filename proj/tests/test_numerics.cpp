#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "kfatt/numerics.hpp"

using namespace kfatt;

TEST(Softmax, UniformOnEqualLogits) {
  const Tensor p = softmax(Tensor::vec({0.0, 0.0, 0.0}));
  for (double x : p.data()) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, SingleElementIsOne) { EXPECT_EQ(softmax(Tensor::vec({-7.25})).item(), 1.0); }

TEST(Softmax, LargeLogitsStayFinite) {
  const Tensor p = softmax(Tensor::vec({1000.0, 0.0}));
  ASSERT_TRUE(p.all_finite());
  EXPECT_NEAR(p[0], 1.0, 1e-15);
  EXPECT_NEAR(p[1], 0.0, 1e-15);
}

TEST(Softmax, EmptyThrows) {
  try {
    softmax(Tensor({0}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty logits");
  }
}

TEST(Softmax, SumsToOneAndPermutationEquivariant) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(12);
    const Tensor x = rng.normal_tensor({n}, 20.0);
    const Tensor p = softmax(x);
    double s = 0.0;
    for (double v : p.data()) {
      EXPECT_GT(v, 0.0 - 1e-300);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    Tensor xp({n});
    for (std::size_t i = 0; i < n; ++i) xp[i] = x[perm[i]];
    const Tensor pp = softmax(xp);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(pp[i], p[perm[i]], 1e-15);
  }
}

TEST(GaussianLogpdf, AtMean) {
  EXPECT_NEAR(gaussian_logpdf(Tensor::vec({0.3}), Tensor::vec({0.3}), 1.0), -0.5 * std::log(2.0 * std::numbers::pi),
              1e-15);
  EXPECT_NEAR(gaussian_logpdf(Tensor::vec({0.3}), Tensor::vec({0.3}), 1.0), -0.91894, 1e-5);
}

TEST(GaussianLogpdf, UnitOffset) {
  EXPECT_NEAR(gaussian_logpdf(Tensor::vec({1.0}), Tensor::vec({0.0}), 1.0),
              -0.5 * std::log(2.0 * std::numbers::pi) - 0.5, 1e-15);
}

TEST(GaussianLogpdf, MatchesProductOfDensities) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = rng.normal_tensor({4}), m = rng.normal_tensor({4});
    const double sigma = rng.uniform(0.2, 3.0);
    // independent path: log of the product of 1-D densities
    double prod = 1.0;
    for (std::size_t i = 0; i < 4; ++i) {
      const double z = (x[i] - m[i]) / sigma;
      prod *= std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
    }
    EXPECT_NEAR(gaussian_logpdf(x, m, sigma), std::log(prod), 1e-12);
  }
}

TEST(GaussianLogpdf, MaximizedAtMean) {
  Rng rng(6);
  const Tensor m = rng.normal_tensor({3});
  const double best = gaussian_logpdf(m, m, 0.7);
  for (int i = 0; i < 100; ++i) {
    Tensor x = m;
    const Tensor d = rng.normal_tensor({3}, 0.1);
    for (std::size_t j = 0; j < 3; ++j) x[j] += d[j];
    EXPECT_LT(gaussian_logpdf(x, m, 0.7), best);
  }
}

TEST(GaussianLogpdf, Errors) {
  EXPECT_THROW(gaussian_logpdf(Tensor::vec({0.0}), Tensor::vec({0.0}), 0.0), Error);
  EXPECT_THROW(gaussian_logpdf(Tensor::vec({0.0}), Tensor::vec({0.0}), -1.0), Error);
  EXPECT_THROW(gaussian_logpdf(Tensor::vec({0.0, 1.0}), Tensor::vec({0.0}), 1.0), Error);
  try {
    gaussian_logpdf(Tensor::vec({0.0}), Tensor::vec({0.0}), 0.0);
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "non-positive sigma");
  }
}

TEST(FiniteDiff, SquaredNorm) {
  const Tensor g = finite_diff_grad([](const Tensor& x) { return squared_norm(x.data()); }, Tensor::vec({1.0, 2.0}));
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
}

TEST(FiniteDiff, ConstantHasZeroGradient) {
  const Tensor g = finite_diff_grad([](const Tensor&) { return 3.5; }, Tensor::vec({1.0, -2.0, 0.5}));
  for (double x : g.data()) EXPECT_EQ(x, 0.0);
}

TEST(FiniteDiff, NonFiniteNamesIndex) {
  try {
    finite_diff_grad([](const Tensor& x) { return std::log(x[1]); }, Tensor::vec({1.0, 1e-5}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos) << e.what();
  }
}

TEST(Matmul, AgreesAcrossLayoutsAndCountsMacs) {
  Rng rng(2);
  const Tensor a = rng.normal_tensor({3, 5}), b = rng.normal_tensor({5, 4});
  Tensor bt({4, 5}), at({5, 3});
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 4; ++j) bt.at(j, i) = b.at(i, j);
    for (std::size_t j = 0; j < 3; ++j) at.at(i, j) = a.at(j, i);
  }
  MacScope scope;
  const Tensor c = matmul(a, b);
  EXPECT_EQ(scope.count(), 3u * 5u * 4u);
  EXPECT_LT(max_abs_diff(c, matmul_nt(a, bt)), 1e-14);
  EXPECT_LT(max_abs_diff(c, matmul_tn(at, b)), 1e-14);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < 5; ++p) s += a.at(i, p) * b.at(p, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-14);
    }
  EXPECT_THROW(matmul(a, a), Error);
}

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), Error);
  EXPECT_EQ(Tensor({2, 3}).size(), 6u);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    differs |= x != c();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, SplitIsDeterministicAndIndependentOfParentProgress) {
  Rng a(9);
  const Rng s1 = a.split(3);
  for (int i = 0; i < 10; ++i) a();
  Rng s2 = a.split(3), s1c = s1;
  for (int i = 0; i < 100; ++i) EXPECT_EQ(s1c(), s2());
  Rng x = Rng(9).split(3), y = Rng(9).split(4);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += x() == y();
  EXPECT_EQ(same, 0);
}

TEST(Rng, NormalMoments) {
  Rng rng(1);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Stable, SigmoidAndSoftplusExtremes) {
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus(800.0), 800.0, 1e-12);
  EXPECT_TRUE(std::isfinite(softplus(-800.0)));
}
