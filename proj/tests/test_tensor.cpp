#include "test_util.hpp"

#include <Eigen/Dense>

using namespace gapa;
using namespace gapa::testing;

namespace {

// Gaussian elimination with partial pivoting, one right-hand side.
std::vector<double> gauss_solve(Matrix a, std::vector<double> b) {
  const std::size_t n = a.rows();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
    if (piv != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a(c, k), a(piv, k));
      std::swap(b[c], b[piv]);
    }
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a(r, c) / a(c, c);
      for (std::size_t k = c; k < n; ++k) a(r, k) -= f * a(c, k);
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a(i, k) * x[k];
    x[i] = s / a(i, i);
  }
  return x;
}

}  // namespace

TEST(Cholesky, IdentitySolveReturnsRhs) {
  const Vector b{1.5, -2.0, 7.0};
  EXPECT_EQ(cholesky_solve(Matrix::identity(3), b), b);
}

TEST(Cholesky, ScalarDiagonal) {
  const Vector x = cholesky_solve(Matrix{{4.0}}, Vector{8.0});
  EXPECT_DOUBLE_EQ(x[0], 2.0);
}

TEST(Cholesky, MatchesPivotedElimination) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_spd(rng, 5);
    const Matrix b = random_matrix(rng, 5, 3);
    const Matrix x = cholesky_solve(a, b);
    const Matrix ax = matmul(a, x);
    double resid = 0.0;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j) resid = std::max(resid, std::abs(ax(i, j) - b(i, j)));
    EXPECT_LE(resid / inf_norm(b), 1e-8);
    for (std::size_t j = 0; j < 3; ++j) {
      std::vector<double> col(5);
      for (std::size_t i = 0; i < 5; ++i) col[i] = b(i, j);
      const auto ref = gauss_solve(a, col);
      for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(x(i, j), ref[i], 1e-10);
    }
  }
}

TEST(Cholesky, InverseRecoversIdentity) {
  Rng rng(3);
  for (std::size_t n : {1u, 2u, 7u, 16u, 33u, 64u}) {
    const Matrix a = random_spd(rng, n);
    const Matrix inv = cholesky_solve(a, Matrix::identity(n));
    const Matrix prod = matmul(inv, a);
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) row += std::abs(prod(i, j) - (i == j ? 1.0 : 0.0));
      err = std::max(err, row);
    }
    EXPECT_LE(err, 1e-8) << "n=" << n;
  }
}

TEST(Cholesky, AgreesWithEigenLlt) {
  Rng rng(5);
  const std::size_t n = 12;
  const Matrix a = random_spd(rng, n);
  const Vector b = random_vector(rng, n);
  Eigen::MatrixXd ea(n, n);
  Eigen::VectorXd eb(n);
  for (std::size_t i = 0; i < n; ++i) {
    eb(i) = b[i];
    for (std::size_t j = 0; j < n; ++j) ea(i, j) = a(i, j);
  }
  const Eigen::VectorXd ex = ea.llt().solve(eb);
  const Vector x = cholesky_solve(a, b);
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(x[i], ex(i), 1e-12);
}

TEST(Cholesky, RejectsIndefinite) {
  EXPECT_GAPA_ERROR(Cholesky(Matrix{{1.0, 2.0}, {2.0, 1.0}}), ErrorCode::kNotPositiveDefinite);
  EXPECT_GAPA_ERROR(Cholesky(Matrix{{0.0}}), ErrorCode::kNotPositiveDefinite);
}

TEST(Cholesky, RejectsShapeMismatch) {
  EXPECT_GAPA_ERROR(Cholesky(Matrix(2, 3)), ErrorCode::kDimensionMismatch);
  EXPECT_GAPA_ERROR(cholesky_solve(Matrix::identity(2), Vector{1.0, 2.0, 3.0}),
                    ErrorCode::kDimensionMismatch);
}

TEST(Cholesky, SymmetrisesSlightlyAsymmetricInput) {
  Matrix a{{2.0, 1.0 + 1e-13}, {1.0 - 1e-13, 2.0}};
  const Vector x = cholesky_solve(a, Vector{3.0, 3.0});
  EXPECT_NEAR(x[0], 1.0, 1e-12);
  EXPECT_NEAR(x[1], 1.0, 1e-12);
}

TEST(Kernels, SquaredDropsSign) {
  EXPECT_EQ(squared(Matrix{{-2.0, 3.0}}), (Matrix{{4.0, 9.0}}));
}

TEST(Kernels, SquaredIsExactSquare) {
  Rng rng(8);
  const Matrix w = random_matrix(rng, 9, 7, 100.0);
  const Matrix s = squared(w);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(s(i, j), w(i, j) * w(i, j));
}

TEST(Kernels, Hadamard) {
  EXPECT_EQ(hadamard(Vector{1.0, 2.0}, Vector{3.0, 4.0}), (Vector{3.0, 8.0}));
  EXPECT_GAPA_ERROR(hadamard(Vector{1.0}, Vector{1.0, 2.0}), ErrorCode::kDimensionMismatch);
}

TEST(Kernels, MatvecIdentity) {
  EXPECT_EQ(matvec(Matrix::identity(2), Vector{5.0, 7.0}), (Vector{5.0, 7.0}));
  EXPECT_GAPA_ERROR(matvec(Matrix::identity(2), Vector{1.0}), ErrorCode::kDimensionMismatch);
}

TEST(Kernels, MatvecMatchesLoop) {
  Rng rng(9);
  const Matrix w = random_matrix(rng, 4, 6);
  const Vector x = random_vector(rng, 6);
  const Vector y = matvec(w, x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += w(r, c) * x[c];
    EXPECT_DOUBLE_EQ(y[r], s);
  }
}

TEST(GaussianVector, RejectsNegativeVariance) {
  EXPECT_GAPA_ERROR(GaussianVector(Vector{0.0, 1.0}, Vector{1.0, -1e-300}),
                    ErrorCode::kNegativeVariance);
  EXPECT_GAPA_ERROR(GaussianVector(Vector{0.0}, Vector{1.0, 1.0}),
                    ErrorCode::kDimensionMismatch);
}

TEST(GaussianVector, PointMassHasZeroVariance) {
  const auto g = GaussianVector::point(Vector{1.0, 2.0});
  EXPECT_EQ(g.var(), (Vector{0.0, 0.0}));
}

TEST(Matrix, RejectsBadData) {
  EXPECT_GAPA_ERROR(Matrix(2, 2, std::vector<double>{1.0, 2.0, 3.0}),
                    ErrorCode::kDimensionMismatch);
}
