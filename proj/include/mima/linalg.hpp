#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

#include "mima/error.hpp"

namespace mima {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Matrix transposed() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);
Matrix operator*(const Matrix& a, const Matrix& b);

// a^T * b without forming the transpose.
Matrix transpose_times(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);
// Frobenius inner product <a, b>.
double inner(const Matrix& a, const Matrix& b);
double trace(const Matrix& a);
bool all_finite(const Matrix& a);

Matrix vstack(std::span<const Matrix> blocks);
Matrix row_block(const Matrix& a, std::size_t first_row, std::size_t count);
void set_row_block(Matrix& a, std::size_t first_row, const Matrix& block);

void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

// Cholesky factor L with A = L L^T. Construction throws NotSPD on a non-positive pivot.
class Cholesky {
 public:
  Cholesky() = default;
  explicit Cholesky(const Matrix& a);

  std::size_t dim() const noexcept { return lower_.rows(); }
  const Matrix& lower() const noexcept { return lower_; }

  Matrix solve(const Matrix& b) const;

 private:
  Matrix lower_;
};

// Solves A X = B for symmetric positive-definite A.
Matrix solve_spd(const Matrix& a, const Matrix& b);

// A + lambda * I.
Matrix ridge_of(const Matrix& a, double lambda);

// Central-difference gradient of a scalar function of a matrix.
Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& x, double h);

// Seeded generator. Single owner; derive independent streams with split().
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  double uniform();
  double normal();
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0);

  // Child generator that depends only on (seed, stream), not on how much of
  // this generator has been consumed.
  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace mima
