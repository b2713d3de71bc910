#include <gtest/gtest.h>

#include <cmath>

#include "mima/linalg.hpp"
#include "mima/oracles.hpp"

namespace mima {
namespace {

using oracles::gauss_jordan_inverse;
using oracles::rel_err;

Matrix random_spd(Rng& rng, std::size_t n, std::size_t tall) {
  const Matrix g = rng.normal_matrix(tall, n);
  return transpose_times(g, g);
}

TEST(SolveSpd, IdentityReturnsRhs) {
  Rng rng(1);
  const Matrix b = rng.normal_matrix(3, 2);
  EXPECT_EQ(solve_spd(Matrix::identity(3), b), b);
}

TEST(SolveSpd, Diagonal) {
  const Matrix x = solve_spd(Matrix::from_rows({{4, 0}, {0, 9}}), Matrix::from_rows({{8}, {27}}));
  EXPECT_DOUBLE_EQ(x(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(x(1, 0), 3.0);
}

TEST(SolveSpd, MatchesGaussJordanInverse) {
  Rng rng(7);
  const Matrix a = random_spd(rng, 8, 12);
  const Matrix b = rng.normal_matrix(8, 3);
  const Matrix x = solve_spd(a, b);
  const Matrix oracle = gauss_jordan_inverse(a) * b;
  EXPECT_LE(rel_err(x, oracle), 1e-9);
}

TEST(SolveSpd, ResidualOverManySeededSystems) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 32));
    const Matrix a = random_spd(rng, n, n + 4);
    const Matrix b = rng.normal_matrix(n, static_cast<std::size_t>(rng.uniform_int(1, 4)));
    const Matrix x = solve_spd(a, b);
    const double resid = frobenius_norm(a * x - b) / std::max(1.0, frobenius_norm(b));
    ASSERT_LE(resid, 1e-9) << "trial " << trial << " n=" << n;
  }
}

TEST(SolveSpd, RejectsIndefiniteAndBadShapes) {
  try {
    solve_spd(Matrix::from_rows({{1, 0}, {0, -1}}), Matrix(2, 1, 1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotSPD);
  }
  try {
    solve_spd(Matrix::identity(2), Matrix(3, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionMismatch);
  }
  try {
    solve_spd(Matrix(2, 3), Matrix(2, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionMismatch);
  }
}

TEST(RidgeOf, Basics) {
  EXPECT_EQ(ridge_of(Matrix(2, 2), 1.0), Matrix::identity(2));
  EXPECT_EQ(ridge_of(Matrix::identity(2), 0.0), Matrix::identity(2));
  EXPECT_THROW(ridge_of(Matrix(2, 3), 1.0), Error);
}

// Eigenvalues of a 2x2 block from the characteristic polynomial.
std::pair<double, double> eig2(double a, double b, double c, double d) {
  const double tr = a + d, det = a * d - b * c;
  const double disc = std::sqrt(tr * tr / 4 - det);
  return {tr / 2 - disc, tr / 2 + disc};
}

TEST(RidgeOf, ShiftsEigenvalues) {
  Rng rng(3);
  Matrix a = random_spd(rng, 4, 6);
  const Matrix shifted = ridge_of(a, 1e-6);
  // Leading 2x2 principal block: its eigenvalues shift by exactly lambda.
  const auto [lo, hi] = eig2(a(0, 0), a(0, 1), a(1, 0), a(1, 1));
  const auto [slo, shi] = eig2(shifted(0, 0), shifted(0, 1), shifted(1, 0), shifted(1, 1));
  EXPECT_NEAR(slo - lo, 1e-6, 1e-12);
  EXPECT_NEAR(shi - hi, 1e-6, 1e-12);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_EQ(shifted(i, j), i == j ? a(i, j) + 1e-6 : a(i, j));
}

TEST(FiniteDiff, QuadraticAndSum) {
  const Matrix x = Matrix::from_rows({{3}});
  const Matrix g = finite_diff_grad([](const Matrix& m) { return 0.5 * inner(m, m); }, x, 1e-5);
  EXPECT_NEAR(g(0, 0), 3.0, 1e-8);

  Rng rng(5);
  const Matrix y = rng.normal_matrix(3, 4);
  const Matrix ones = finite_diff_grad(
      [](const Matrix& m) {
        double s = 0.0;
        for (double v : m.data()) s += v;
        return s;
      },
      y, 1e-4);
  for (double v : ones.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, QuadraticFormMatchesAnalytic) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_spd(rng, 5, 7);
    const Matrix x = rng.normal_matrix(5, 2);
    // f(X) = 1/2 tr(X^T A X), grad = A X
    const Matrix g = finite_diff_grad(
        [&](const Matrix& m) { return 0.5 * inner(m, a * m); }, x, 1e-4);
    const Matrix want = a * x;
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g.data()[i], want.data()[i], 1e-7);
  }
}

TEST(FiniteDiff, NonFiniteValueIsReported) {
  try {
    finite_diff_grad([](const Matrix& m) { return std::log(m(0, 0)); }, Matrix(1, 1, 0.0), 1e-3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonFiniteFunctionValue);
  }
}

TEST(Rng, ReproducibleAndSplitIndependentOfConsumption) {
  Rng a(99), b(99);
  EXPECT_EQ(a.normal_matrix(4, 4), b.normal_matrix(4, 4));
  Rng c(99);
  const Rng child_before = c.split(3);
  c.normal_matrix(10, 10);
  Rng child_after = c.split(3);
  Rng child_copy = child_before;
  EXPECT_EQ(child_copy.normal_matrix(2, 2), child_after.normal_matrix(2, 2));
  EXPECT_NE(Rng(1).split(1).normal(), Rng(1).split(2).normal());
}

}  // namespace
}  // namespace mima
