#include <cmath>

#include <gtest/gtest.h>

#include "support/fixtures.hpp"
#include "support/reference.hpp"
#include "vitprune/linalg.hpp"

namespace vitprune {
namespace {

using testing::TestRng;

Tensor random_matrix(std::size_t m, std::size_t n, std::uint64_t seed) {
  Tensor t({m, n});
  TestRng rng(seed);
  for (float& x : t.values()) x = static_cast<float>(rng.normal());
  return t;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0f;
  const Tensor a = random_matrix(3, 4, 1);
  EXPECT_EQ(matmul(eye, a), a);
}

TEST(Matmul, HandComputedProduct) {
  const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const Tensor b = Tensor::matrix(2, 1, {0, 1});
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_FLOAT_EQ(c(0, 0), 2.0f);
  EXPECT_FLOAT_EQ(c(1, 0), 4.0f);
}

TEST(Matmul, InnerExtentMismatchThrows) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({4, 5})), DimensionError);
}

TEST(Matmul, TransposedVariantsAgree) {
  const Tensor a = random_matrix(3, 5, 2), b = random_matrix(4, 5, 3);
  EXPECT_LT(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))), 1e-6);
  const Tensor c = random_matrix(5, 3, 4);
  EXPECT_LT(max_abs_diff(matmul_tn(c, c), matmul(transpose(c), c)), 1e-6);
}

TEST(Matmul, AssociativeOnRandomTriples) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor a = random_matrix(4, 4, 3 * s), b = random_matrix(4, 4, 3 * s + 1),
                 c = random_matrix(4, 4, 3 * s + 2);
    const Tensor left = matmul(matmul(a, b), c), right = matmul(a, matmul(b, c));
    EXPECT_LE(max_abs_diff(left, right), 1e-4 * std::max(1.0, max_abs(left)));
  }
}

TEST(Softmax, UniformRow) {
  const Tensor s = softmax_rows(Tensor::matrix(1, 3, {0, 0, 0}));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(s(0, j), 1.0 / 3.0, 1e-7);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Tensor s = softmax_rows(Tensor::matrix(1, 2, {1000, 0}));
  EXPECT_NEAR(s(0, 0), 1.0, 1e-7);
  EXPECT_NEAR(s(0, 1), 0.0, 1e-7);
  EXPECT_TRUE(std::isfinite(s(0, 1)));
}

TEST(Softmax, LogTwoGivesTwoThirds) {
  const Tensor s = softmax_rows(Tensor::matrix(1, 2, {static_cast<float>(std::log(2.0)), 0}));
  EXPECT_NEAR(s(0, 0), 2.0 / 3.0, 1e-6);
  EXPECT_NEAR(s(0, 1), 1.0 / 3.0, 1e-6);
}

TEST(Softmax, RowsSumToOneAndIgnoreShifts) {
  const Tensor a = random_matrix(6, 9, 11);
  const Tensor s = softmax_rows(a);
  Tensor shifted = a;
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 9; ++j) shifted(i, j) += static_cast<float>(i) * 3.5f;
  }
  for (std::size_t i = 0; i < 6; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GE(s(i, j), 0.0f);
      sum += s(i, j);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  EXPECT_LT(max_abs_diff(s, softmax_rows(shifted)), 1e-6);
}

TEST(Gelu, KnownValues) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(10.0), 10.0, 1e-6);
  EXPECT_NEAR(gelu(1.0), 0.841345, 1e-6);
  const Tensor t = gelu(Tensor::matrix(1, 3, {-1, 0, 1}));
  EXPECT_NEAR(t(0, 2), 0.841345, 1e-6);
  EXPECT_NEAR(t(0, 0), -0.158655, 1e-6);
}

TEST(Gelu, DerivativeMatchesCentralDifference) {
  for (double x = -4.0; x <= 4.0; x += 0.37) {
    const double fd = (gelu(x + 1e-5) - gelu(x - 1e-5)) / 2e-5;
    EXPECT_NEAR(gelu_derivative(x), fd, 1e-7) << x;
  }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  const Tensor y = layernorm(Tensor::matrix(1, 4, {3, 3, 3, 3}), Tensor({4}, 1.0f),
                             Tensor({4}, 0.0f), 1e-6);
  for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  const Tensor y = layernorm(random_matrix(2, 5, 4), Tensor({5}, 0.0f), Tensor({5}, 0.25f), 1e-6);
  for (float v : y.values()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(LayerNorm, TwoElementRow) {
  const Tensor y =
      layernorm(Tensor::matrix(1, 2, {1, 3}), Tensor({2}, 1.0f), Tensor({2}, 0.0f), 1e-12);
  EXPECT_NEAR(y(0, 0), -1.0, 1e-6);
  EXPECT_NEAR(y(0, 1), 1.0, 1e-6);
}

TEST(LayerNorm, NormalizedMomentsAndInvariance) {
  const Tensor x = random_matrix(5, 16, 9);
  const Tensor y = layernorm(x, Tensor({16}, 1.0f), Tensor({16}, 0.0f), 1e-6);
  for (std::size_t i = 0; i < 5; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mean += y(i, j);
    mean /= 16;
    for (std::size_t j = 0; j < 16; ++j) var += (y(i, j) - mean) * (y(i, j) - mean);
    var /= 16;
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
  Tensor z = x;
  for (float& v : z.values()) v = 2.5f * v + 7.0f;
  EXPECT_LT(max_abs_diff(y, layernorm(z, Tensor({16}, 1.0f), Tensor({16}, 0.0f), 1e-6)), 1e-4);
}

TEST(Svd, DiagonalMatrix) {
  const auto f = svd(Tensor::matrix(2, 2, {3, 0, 0, 1}));
  ASSERT_EQ(f.sigma.size(), 2u);
  EXPECT_NEAR(f.sigma[0], 3.0, 1e-6);
  EXPECT_NEAR(f.sigma[1], 1.0, 1e-6);
}

TEST(Svd, RankOneOuterProduct) {
  const std::vector<float> u = {1, 2, 2}, v = {3, 4};
  Tensor a({3, 2});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) a(i, j) = u[i] * v[j];
  }
  const auto f = svd(a);
  EXPECT_NEAR(f.sigma[0], 3.0 * 5.0, 1e-5);
  EXPECT_NEAR(f.sigma[1], 0.0, 1e-5);
}

template <typename T>
double reconstruction_error(const BasicTensor<T>& a, const BasicSvd<T>& f) {
  const std::size_t m = a.rows(), n = a.cols(), r = f.sigma.size();
  double worst = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < r; ++k) s += f.u(i, k) * f.sigma[k] * f.vt(k, j);
      worst = std::max(worst, std::abs(s - a(i, j)));
    }
  }
  return worst;
}

template <typename T>
double orthonormality_error(const BasicTensor<T>& q, bool columns) {
  const std::size_t n = columns ? q.cols() : q.rows(), len = columns ? q.rows() : q.cols();
  double worst = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        dot += columns ? q(k, a) * q(k, b) : q(a, k) * q(b, k);
      }
      worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }
  }
  return worst;
}

TEST(Svd, RandomFourByFourReconstructs) {
  const Tensor a = random_matrix(4, 4, 7);
  const auto f = svd(a);
  EXPECT_LT(reconstruction_error(a, f), 1e-4);
  EXPECT_LT(orthonormality_error(f.u, true), 1e-4);
  EXPECT_LT(orthonormality_error(f.vt, false), 1e-4);
}

TEST(Svd, InvariantsOnRectangularAndRankDeficientInputs) {
  TestRng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t m = 1 + rng.below(12), n = 1 + rng.below(12);
    Tensor a = random_matrix(m, n, 100 + trial);
    if (trial % 3 == 0 && m > 1) {
      for (std::size_t j = 0; j < n; ++j) a(m - 1, j) = a(0, j);  // repeated row
    }
    const auto f = svd(a);
    ASSERT_EQ(f.sigma.size(), std::min(m, n));
    for (std::size_t k = 0; k + 1 < f.sigma.size(); ++k) EXPECT_GE(f.sigma[k], f.sigma[k + 1]);
    for (float s : f.sigma) EXPECT_GE(s, 0.0f);
    EXPECT_LE(reconstruction_error(a, f), 1e-4 * std::max(1.0, max_abs(a)));
    EXPECT_LT(orthonormality_error(f.u, true), 1e-4);
    EXPECT_LT(orthonormality_error(f.vt, false), 1e-4);
    for (std::size_t k = 0; k < f.u.cols(); ++k) {
      for (std::size_t i = 0; i < m; ++i) {
        if (std::abs(f.u(i, k)) > 1e-6) {
          EXPECT_GT(f.u(i, k), 0.0f) << "sign convention, column " << k;
          break;
        }
      }
    }
  }
}

TEST(Svd, SingularValuesMatchEigenOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    TensorD a({9, 6});
    TestRng rng(500 + s);
    for (double& x : a.values()) x = rng.normal();
    const auto f = svd(a);
    const auto want = testing::reference_singular_values(a);
    for (std::size_t k = 0; k < f.sigma.size(); ++k) EXPECT_NEAR(f.sigma[k], want[k], 1e-9);
  }
}

TEST(Svd, EnergyIdentityUpToSixtyFour) {
  for (std::size_t n : {2u, 8u, 17u, 33u, 64u}) {
    const Tensor a = random_matrix(n, 64 - n / 2, 900 + n);
    const auto f = svd(a);
    double energy = 0.0;
    for (float s : f.sigma) energy += static_cast<double>(s) * s;
    const double fro = frobenius_norm(a);
    EXPECT_NEAR(energy, fro * fro, 1e-3 * fro * fro) << n;
  }
}

TEST(Svd, DeterministicAcrossCalls) {
  const Tensor a = random_matrix(7, 5, 77);
  const auto f = svd(a), g = svd(a);
  EXPECT_EQ(f.u, g.u);
  EXPECT_EQ(f.vt, g.vt);
  EXPECT_EQ(f.sigma, g.sigma);
}

TEST(Svd, ZeroMatrixHasOrthonormalFactors) {
  const auto f = svd(Tensor({3, 4}));
  for (float s : f.sigma) EXPECT_EQ(s, 0.0f);
  EXPECT_LT(orthonormality_error(f.u, true), 1e-6);
  EXPECT_LT(orthonormality_error(f.vt, false), 1e-6);
}

}  // namespace
}  // namespace vitprune
