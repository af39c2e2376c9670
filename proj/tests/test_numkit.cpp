#include <gtest/gtest.h>

#include <cmath>

#include "mdlab/numkit.hpp"
#include "mdlab/rng.hpp"
#include "oracles.hpp"

using namespace mdlab;
using num::Matrix;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(r, c);
  for (auto& x : m.values()) x = static_cast<float>(rng.normal());
  return m;
}

}  // namespace

TEST(Matmul, AgreesWithLoopOracle) {
  const auto a = random_matrix(7, 5, 1), b = random_matrix(5, 9, 2);
  const auto c = num::matmul(a, b);
  const auto ref = oracle::matmul(oracle::from(a), oracle::from(b));
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(c(i, j), double(ref[i][j]), 1e-5);
}

TEST(Matmul, TransposedVariantsMatchExplicitTranspose) {
  const auto a = random_matrix(6, 4, 3), b = random_matrix(5, 4, 4), e = random_matrix(6, 3, 5);
  const auto bt = num::matmul_bt(a, b);
  const auto bt_ref = num::matmul(a, b.transpose());
  const auto at = num::matmul_at(a, e);
  const auto at_ref = num::matmul(a.transpose(), e);
  for (std::size_t i = 0; i < bt.size(); ++i) EXPECT_NEAR(bt.values()[i], bt_ref.values()[i], 1e-5);
  for (std::size_t i = 0; i < at.size(); ++i) EXPECT_NEAR(at.values()[i], at_ref.values()[i], 1e-5);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(num::matmul(Matrix(2, 3), Matrix(2, 3)), std::invalid_argument);
  EXPECT_THROW(num::matmul_bt(Matrix(2, 3), Matrix(2, 4)), std::invalid_argument);
  EXPECT_THROW(Matrix(2, 2, std::vector<float>(3)), std::invalid_argument);
}

TEST(Softmax, RowsSumToOneAndMatchOracle) {
  auto m = random_matrix(4, 11, 6);
  for (auto& x : m.values()) x *= 30.0f;  // large spread exercises the max shift
  const auto p = num::softmax_rows(m);
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<oracle::LD> row(m.row(r).begin(), m.row(r).end());
    const auto ref = oracle::softmax(row);
    double s = 0;
    for (std::size_t j = 0; j < 11; ++j) {
      s += p(r, j);
      EXPECT_NEAR(p(r, j), double(ref[j]), 1e-6);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, ShiftInvariant) {
  std::vector<float> a{1, 2, 3}, b{101, 102, 103};
  num::softmax_inplace(std::span<float>(a));
  num::softmax_inplace(std::span<float>(b));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-7);
}

TEST(RmsNorm, UnitGainGivesUnitRms) {
  std::vector<float> x{3, -4, 0, 12}, g(4, 1.0f), y(4);
  num::rms_norm<float>(x, g, y, 0.0);
  double ms = 0;
  for (float v : y) ms += v * v;
  EXPECT_NEAR(ms / 4, 1.0, 1e-6);
  EXPECT_NEAR(y[1] / y[0], -4.0 / 3.0, 1e-6);
}

TEST(Cosine, ZeroVectorIsZero) {
  std::vector<float> z(3, 0.0f), a{1, 2, 3};
  EXPECT_EQ(num::cosine(z, a), 0.0);
  EXPECT_NEAR(num::cosine(a, a), 1.0, 1e-12);
}

TEST(Pca, OrthonormalAndEigenvaluesMatchJacobi) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const std::size_t d = 2 + rng.below(7);  // 2..8
    const std::size_t n = d + 3 + rng.below(10);
    Matrix x(n, d);
    // anisotropic scales so eigenvalues separate
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) x(r, c) = static_cast<float>(rng.normal() * (1.0 + 1.5 * c));
    const std::size_t k = std::min<std::size_t>(3, d);
    const auto pca = num::pca_fit(x, k);
    ASSERT_EQ(pca.k(), k);
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) {
        double dotab = 0;
        for (std::size_t i = 0; i < d; ++i) dotab += double(pca.basis(i, a)) * pca.basis(i, b);
        EXPECT_NEAR(dotab, a == b ? 1.0 : 0.0, 1e-6) << "seed " << seed;
      }
    const auto ev = oracle::jacobi_eigenvalues(oracle::covariance(oracle::from(x)));
    for (std::size_t a = 0; a < k; ++a)
      EXPECT_NEAR(pca.eigenvalues[a], double(ev[a]), 1e-6 * std::max(1.0, double(ev[0]))) << "seed " << seed;
  }
}

TEST(Pca, DescendingAndSignConvention) {
  const auto x = random_matrix(30, 6, 9);
  const auto pca = num::pca_fit(x, 3);
  EXPECT_GE(pca.eigenvalues[0], pca.eigenvalues[1]);
  EXPECT_GE(pca.eigenvalues[1], pca.eigenvalues[2]);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto col = pca.basis.column(c);
    const auto it = std::max_element(col.begin(), col.end(), [](float a, float b) { return std::abs(a) < std::abs(b); });
    EXPECT_GT(*it, 0.0f);
  }
}

TEST(Pca, RankDeficientReportsDegenerate) {
  Matrix x(5, 4);
  for (std::size_t r = 0; r < 5; ++r) x(r, 0) = static_cast<float>(r);  // variance along one axis only
  const auto pca = num::pca_fit(x, 3);
  EXPECT_TRUE(pca.degenerate);
  EXPECT_EQ(pca.k(), 1u);
  EXPECT_NEAR(std::abs(pca.basis(0, 0)), 1.0, 1e-6);
}

TEST(Pca, RejectsBadArguments) {
  EXPECT_THROW(num::pca_fit(Matrix(1, 3), 1), std::invalid_argument);
  EXPECT_THROW(num::pca_fit(Matrix(4, 3), 4), std::invalid_argument);
  EXPECT_THROW(num::pca_fit(Matrix(4, 3), 0), std::invalid_argument);
}

TEST(Rng, StreamsAreReproducible) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.bits();
    EXPECT_EQ(x, b.bits());
    EXPECT_NE(x, c.bits());
  }
  EXPECT_NE(hash_string(1, "a"), hash_string(1, "b"));
  EXPECT_EQ(hash_string(1, "a"), hash_string(1, "a"));
}
