#pragma once

// Independent reference computations. Nothing here shares code with the
// library paths they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "mima/linalg.hpp"
#include "mima/merge.hpp"

namespace mima::oracles {

inline double rel_err(const Matrix& got, const Matrix& want) {
  const double denom = std::max(1.0, frobenius_norm(want));
  return frobenius_norm(got - want) / denom;
}

inline double rel_err(const std::vector<double>& got, const std::vector<double>& want) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num) / std::max(1e-8, std::sqrt(den));
}

// Inverse by Gauss-Jordan elimination with partial pivoting.
inline Matrix gauss_jordan_inverse(const Matrix& a) {
  const std::size_t n = a.rows();
  std::vector<std::vector<double>> aug(n, std::vector<double>(2 * n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) aug[i][j] = a(i, j);
    aug[i][n + i] = 1.0;
  }
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(aug[r][col]) > std::abs(aug[piv][col])) piv = r;
    if (aug[piv][col] == 0.0) throw std::runtime_error("singular");
    std::swap(aug[piv], aug[col]);
    const double p = aug[col][col];
    for (double& v : aug[col]) v /= p;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = aug[r][col];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < 2 * n; ++j) aug[r][j] -= f * aug[col][j];
    }
  }
  Matrix inv(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) inv(i, j) = aug[i][n + j];
  return inv;
}

// Dense LU with partial pivoting for a square system A x = b.
inline std::vector<double> lu_solve(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t r = k + 1; r < n; ++r)
      if (std::abs(a[r][k]) > std::abs(a[piv][k])) piv = r;
    std::swap(a[piv], a[k]);
    std::swap(b[piv], b[k]);
    if (a[k][k] == 0.0) throw std::runtime_error("singular");
    for (std::size_t r = k + 1; r < n; ++r) {
      const double f = a[r][k] / a[k][k];
      a[r][k] = f;
      for (std::size_t j = k + 1; j < n; ++j) a[r][j] -= f * a[k][j];
      b[r] -= f * b[k];
    }
  }
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t j = ii + 1; j < n; ++j) s -= a[ii][j] * x[j];
    x[ii] = s / a[ii][ii];
  }
  return x;
}

// Solves the merge problem through its full KKT system in the vectorised
// unknowns [vec(phi); vec(M)] of size c*d + m*d, with
//   2 (Q + lambda I) phi - C^T M = 2 (Q + lambda I) W_pre
//   C phi = O*
// Returns phi.
inline Matrix kkt_oracle(const MergeProblem& p, double lambda) {
  const std::size_t c = p.concepts.cols(), d = p.w_pre.cols(), m = p.concepts.rows();
  Matrix q(c, c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < p.regularization.rows(); ++r)
        s += p.regularization(r, i) * p.regularization(r, j);
      q(i, j) = s + (i == j ? lambda : 0.0);
    }
  const std::size_t n = c * d + m * d;
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  std::vector<double> b(n, 0.0);
  auto phi_idx = [&](std::size_t i, std::size_t k) { return i * d + k; };
  auto mul_idx = [&](std::size_t r, std::size_t k) { return c * d + r * d + k; };
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const std::size_t row = phi_idx(i, k);
      for (std::size_t j = 0; j < c; ++j) {
        a[row][phi_idx(j, k)] = 2.0 * q(i, j);
        b[row] += 2.0 * q(i, j) * p.w_pre(j, k);
      }
      for (std::size_t r = 0; r < m; ++r) a[row][mul_idx(r, k)] = -p.concepts(r, i);
    }
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t k = 0; k < d; ++k) {
      const std::size_t row = mul_idx(r, k);
      for (std::size_t j = 0; j < c; ++j) a[row][phi_idx(j, k)] = p.concepts(r, j);
      b[row] = p.o_star(r, k);
    }
  const std::vector<double> x = lu_solve(std::move(a), std::move(b));
  Matrix phi(c, d);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t k = 0; k < d; ++k) phi(i, k) = x[phi_idx(i, k)];
  return phi;
}

// Central differences over a flat vector.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Random merge problem with full-rank C (m <= c) and C_reg (rows >= c).
inline MergeProblem random_merge_problem(Rng& rng, std::size_t c, std::size_t d,
                                         std::size_t concepts, std::size_t l,
                                         std::size_t reg_rows) {
  MergeProblem p;
  p.concept_rows = l;
  p.concepts = rng.normal_matrix(concepts * l, c);
  p.regularization = rng.normal_matrix(reg_rows, c);
  p.w_pre = rng.normal_matrix(c, d);
  p.o_star = rng.normal_matrix(concepts * l, d);
  return p;
}

}  // namespace mima::oracles
