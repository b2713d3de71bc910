#include "mima/linalg.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace mima {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::NotSPD: return "NotSPD";
    case Errc::NonFiniteFunctionValue: return "NonFiniteFunctionValue";
    case Errc::SingularQ: return "SingularQ";
    case Errc::SingularSchur: return "SingularSchur";
    case Errc::StaleFactorization: return "StaleFactorization";
    case Errc::SignatureMismatch: return "SignatureMismatch";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::IncompatibleSignature: return "IncompatibleSignature";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::DegenerateDenominator: return "DegenerateDenominator";
    case Errc::ConfigError: return "ConfigError";
    case Errc::ResampleLimitExceeded: return "ResampleLimitExceeded";
    case Errc::IoError: return "IoError";
    case Errc::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

namespace {

std::string shape_str(const Matrix& a) {
  return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw Error(Errc::DimensionMismatch, "data length " + std::to_string(data_.size()) +
                                             " does not match " + std::to_string(rows) + "x" +
                                             std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw Error(Errc::DimensionMismatch, "ragged row list");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(Errc::DimensionMismatch,
                std::string(what) + ": " + shape_str(a) + " vs " + shape_str(b));
  }
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "add");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "subtract");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(Errc::DimensionMismatch, "multiply " + shape_str(a) + " by " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto src = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

Matrix transpose_times(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw Error(Errc::DimensionMismatch,
                "transpose_times " + shape_str(a) + "^T by " + shape_str(b));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto src = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      auto dst = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aki * src[j];
    }
  }
  return out;
}

double frobenius_norm(const Matrix& a) { return std::sqrt(inner(a, a)); }

double inner(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "inner");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

double trace(const Matrix& a) {
  if (a.rows() != a.cols()) throw Error(Errc::DimensionMismatch, "trace of " + shape_str(a));
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, i);
  return s;
}

bool all_finite(const Matrix& a) {
  for (double v : a.data())
    if (!std::isfinite(v)) return false;
  return true;
}

Matrix vstack(std::span<const Matrix> blocks) {
  if (blocks.empty()) return {};
  const std::size_t cols = blocks.front().cols();
  std::size_t rows = 0;
  for (const Matrix& b : blocks) {
    if (b.cols() != cols) throw Error(Errc::DimensionMismatch, "vstack column count");
    rows += b.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Matrix& b : blocks) data.insert(data.end(), b.data().begin(), b.data().end());
  return Matrix(rows, cols, std::move(data));
}

Matrix row_block(const Matrix& a, std::size_t first_row, std::size_t count) {
  if (first_row + count > a.rows()) throw Error(Errc::DimensionMismatch, "row_block range");
  const auto begin = a.data().begin() + static_cast<std::ptrdiff_t>(first_row * a.cols());
  return Matrix(count, a.cols(),
                std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(count * a.cols())));
}

void set_row_block(Matrix& a, std::size_t first_row, const Matrix& block) {
  if (block.cols() != a.cols() || first_row + block.rows() > a.rows()) {
    throw Error(Errc::DimensionMismatch, "set_row_block range");
  }
  std::copy(block.data().begin(), block.data().end(),
            a.data().begin() + static_cast<std::ptrdiff_t>(first_row * a.cols()));
}

Cholesky::Cholesky(const Matrix& a) {
  if (a.rows() != a.cols()) throw Error(Errc::DimensionMismatch, "Cholesky of " + shape_str(a));
  const std::size_t n = a.rows();
  double scale = 0.0;
  for (double v : a.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > 1e-10 * std::max(1.0, scale)) {
        throw Error(Errc::NotSPD, "matrix is not symmetric");
      }
    }
  }
  lower_ = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= lower_(j, k) * lower_(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      throw Error(Errc::NotSPD, "non-positive pivot at " + std::to_string(j));
    }
    const double ljj = std::sqrt(diag);
    lower_(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= lower_(i, k) * lower_(j, k);
      lower_(i, j) = s / ljj;
    }
  }
}

Matrix Cholesky::solve(const Matrix& b) const {
  const std::size_t n = dim();
  if (b.rows() != n) {
    throw Error(Errc::DimensionMismatch,
                "rhs " + shape_str(b) + " for system of size " + std::to_string(n));
  }
  Matrix x = b;
  const std::size_t m = b.cols();
  // L y = b
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      const double lik = lower_(i, k);
      for (std::size_t j = 0; j < m; ++j) x(i, j) -= lik * x(k, j);
    }
    const double inv = 1.0 / lower_(i, i);
    for (std::size_t j = 0; j < m; ++j) x(i, j) *= inv;
  }
  // L^T x = y
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double lki = lower_(k, ii);
      for (std::size_t j = 0; j < m; ++j) x(ii, j) -= lki * x(k, j);
    }
    const double inv = 1.0 / lower_(ii, ii);
    for (std::size_t j = 0; j < m; ++j) x(ii, j) *= inv;
  }
  return x;
}

Matrix solve_spd(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols()) throw Error(Errc::DimensionMismatch, "solve_spd: A not square");
  if (b.rows() != a.rows()) throw Error(Errc::DimensionMismatch, "solve_spd: B rows");
  return Cholesky(a).solve(b);
}

Matrix ridge_of(const Matrix& a, double lambda) {
  if (a.rows() != a.cols()) throw Error(Errc::DimensionMismatch, "ridge_of: not square");
  if (!(lambda >= 0.0)) throw Error(Errc::InvalidArgument, "ridge_of: negative lambda");
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) out(i, i) += lambda;
  return out;
}

Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& x,
                        double h) {
  if (!(h > 0.0)) throw Error(Errc::InvalidArgument, "finite_diff_grad: step must be positive");
  Matrix grad(x.rows(), x.cols());
  Matrix probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double fp = f(probe);
    probe.data()[i] = orig - h;
    const double fm = f(probe);
    probe.data()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw Error(Errc::NonFiniteFunctionValue, "at entry " + std::to_string(i));
    }
    grad.data()[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

// Box-Muller; std::normal_distribution is not specified bit-for-bit across libraries.
double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(angle);
  has_spare_ = true;
  return r * std::cos(angle);
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw Error(Errc::InvalidArgument, "uniform_int: empty range");
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(engine_() % span);
}

Matrix Rng::normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * normal();
  return m;
}

Rng Rng::split(std::uint64_t stream) const {
  return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
}

}  // namespace mima
