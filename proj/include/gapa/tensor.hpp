#pragma once

// Dense vectors, matrices and the diagonal Gaussian state carried through a
// GAPA forward pass. Everything is double precision and row-major.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gapa/error.hpp"

namespace gapa {

inline std::string dims(std::size_t a, std::size_t b) {
  return std::to_string(a) + " vs " + std::to_string(b);
}

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}
  explicit Vector(std::span<const double> values)
      : data_(values.begin(), values.end()) {}

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    GAPA_REQUIRE(data_.size() == rows_ * cols_, ErrorCode::kDimensionMismatch,
            "matrix data length " + dims(data_.size(), rows_ * cols_));
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      GAPA_REQUIRE(r.size() == cols_, ErrorCode::kDimensionMismatch,
              "ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  const std::vector<double>& values() const noexcept { return data_; }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Mean and per-coordinate variance of an independent Gaussian vector.
class GaussianVector {
 public:
  GaussianVector() = default;
  GaussianVector(Vector mean, Vector var)
      : mean_(std::move(mean)), var_(std::move(var)) {
    GAPA_REQUIRE(mean_.size() == var_.size(), ErrorCode::kDimensionMismatch,
            "gaussian mean/var length " + dims(mean_.size(), var_.size()));
    for (std::size_t i = 0; i < var_.size(); ++i) {
      GAPA_REQUIRE(var_[i] >= 0.0, ErrorCode::kNegativeVariance,
              "variance entry " + std::to_string(i) + " is " +
                  std::to_string(var_[i]));
    }
  }

  /// A point mass: zero variance everywhere.
  static GaussianVector point(Vector mean) {
    Vector var(mean.size(), 0.0);
    return GaussianVector(std::move(mean), std::move(var));
  }

  std::size_t size() const noexcept { return mean_.size(); }
  const Vector& mean() const noexcept { return mean_; }
  const Vector& var() const noexcept { return var_; }

 private:
  Vector mean_;
  Vector var_;
};

// ---------------------------------------------------------------------------
// BLAS-1/2 style kernels.

inline double dot(std::span<const double> a, std::span<const double> b) {
  GAPA_REQUIRE(a.size() == b.size(), ErrorCode::kDimensionMismatch,
          "dot " + dims(a.size(), b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_distance(std::span<const double> a,
                               std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline Vector matvec(const Matrix& w, const Vector& x) {
  GAPA_REQUIRE(w.cols() == x.size(), ErrorCode::kDimensionMismatch,
          "matvec " + dims(w.cols(), x.size()));
  Vector y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

inline Vector hadamard(const Vector& a, const Vector& b) {
  GAPA_REQUIRE(a.size() == b.size(), ErrorCode::kDimensionMismatch,
          "hadamard " + dims(a.size(), b.size()));
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

/// Elementwise square, W ⊙ W.
inline Matrix squared(const Matrix& w) {
  Matrix out(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows() * w.cols(); ++i)
    out.data()[i] = w.data()[i] * w.data()[i];
  return out;
}

inline Vector add(const Vector& a, const Vector& b) {
  GAPA_REQUIRE(a.size() == b.size(), ErrorCode::kDimensionMismatch,
          "add " + dims(a.size(), b.size()));
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  GAPA_REQUIRE(a.cols() == b.rows(), ErrorCode::kDimensionMismatch,
          "matmul " + dims(a.cols(), b.rows()));
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

/// Infinity norm (max absolute row sum).
inline double inf_norm(const Matrix& a) {
  double m = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double s = 0.0;
    for (double v : a.row(r)) s += std::abs(v);
    m = std::max(m, s);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Cholesky factorization.

/// Lower-triangular factor L with A = L Lᵀ. The input is symmetrized as
/// (A + Aᵀ)/2 before factorization to absorb kernel round-off.
class Cholesky {
 public:
  explicit Cholesky(const Matrix& a) : l_(a.rows(), a.cols()) {
    GAPA_REQUIRE(a.rows() == a.cols(), ErrorCode::kDimensionMismatch,
            "cholesky needs a square matrix, got " + dims(a.rows(), a.cols()));
    const std::size_t n = a.rows();
    for (std::size_t j = 0; j < n; ++j) {
      double diag = a(j, j);
      for (std::size_t k = 0; k < j; ++k) diag -= l_(j, k) * l_(j, k);
      if (!(diag > 0.0)) {
        fail(ErrorCode::kNotPositiveDefinite,
             "pivot " + std::to_string(j) + " = " + std::to_string(diag) +
                 " (jitter too small?)");
      }
      const double ljj = std::sqrt(diag);
      l_(j, j) = ljj;
      for (std::size_t i = j + 1; i < n; ++i) {
        double s = 0.5 * (a(i, j) + a(j, i));
        for (std::size_t k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
        l_(i, j) = s / ljj;
      }
    }
  }

  std::size_t size() const noexcept { return l_.rows(); }
  const Matrix& factor() const noexcept { return l_; }

  /// Solves L y = b in place.
  void forward_substitute(std::span<double> b) const {
    const std::size_t n = size();
    GAPA_REQUIRE(b.size() == n, ErrorCode::kDimensionMismatch,
            "triangular solve " + dims(b.size(), n));
    for (std::size_t i = 0; i < n; ++i) {
      double s = b[i];
      for (std::size_t k = 0; k < i; ++k) s -= l_(i, k) * b[k];
      b[i] = s / l_(i, i);
    }
  }

  /// Solves Lᵀ x = y in place.
  void backward_substitute(std::span<double> y) const {
    const std::size_t n = size();
    GAPA_REQUIRE(y.size() == n, ErrorCode::kDimensionMismatch,
            "triangular solve " + dims(y.size(), n));
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < n; ++k) s -= l_(k, ii) * y[k];
      y[ii] = s / l_(ii, ii);
    }
  }

  Vector solve(const Vector& b) const {
    Vector x = b;
    forward_substitute(x.span());
    backward_substitute(x.span());
    return x;
  }

  Matrix solve(const Matrix& b) const {
    GAPA_REQUIRE(b.rows() == size(), ErrorCode::kDimensionMismatch,
            "cholesky solve rhs rows " + dims(b.rows(), size()));
    Matrix x(b.rows(), b.cols());
    std::vector<double> col(b.rows());
    for (std::size_t c = 0; c < b.cols(); ++c) {
      for (std::size_t r = 0; r < b.rows(); ++r) col[r] = b(r, c);
      forward_substitute(col);
      backward_substitute(col);
      for (std::size_t r = 0; r < b.rows(); ++r) x(r, c) = col[r];
    }
    return x;
  }

  /// bᵀ A⁻¹ b computed as ‖L⁻¹ b‖².
  double quadratic_form(std::span<const double> b) const {
    std::vector<double> y(b.begin(), b.end());
    forward_substitute(y);
    double s = 0.0;
    for (double v : y) s += v * v;
    return s;
  }

 private:
  Matrix l_;
};

/// Solves A X = B for symmetric positive definite A (jitter already added).
inline Matrix cholesky_solve(const Matrix& a, const Matrix& b) {
  return Cholesky(a).solve(b);
}

inline Vector cholesky_solve(const Matrix& a, const Vector& b) {
  return Cholesky(a).solve(b);
}

}  // namespace gapa
