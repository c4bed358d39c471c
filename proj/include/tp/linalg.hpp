#pragma once

/**
 * Dense linear algebra for subspace construction and the detector.
 *
 * Everything is double precision and row-major. The eigensolver is a cyclic
 * Jacobi method: it converges when the off-diagonal Frobenius norm drops to
 * 1e-12 of the matrix norm, and gives up after 64 sweeps. Eigenvectors come
 * back sign-normalized (largest-magnitude component positive, lowest index on
 * ties) so downstream bases are reproducible bit for bit.
 */

#include <cstddef>
#include <span>
#include <vector>

namespace tp::rng {
class Engine;
}

namespace tp::linalg {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::vector<double> col(std::size_t c) const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  Matrix transposed() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct EigenResult {
  std::vector<double> values;  // non-increasing
  Matrix vectors;              // column j pairs with values[j]
};

Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ·b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a·bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// xᵀ·A for a row vector x; result length a.cols().
std::vector<double> vecmat(std::span<const double> x, const Matrix& a);

double frobenius_norm(std::span<const double> v);
double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
Matrix subtract(const Matrix& a, const Matrix& b);

/// max |QᵀQ − I|
double orthonormality_error(const Matrix& q);

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
/// Throws ContractViolation for non-square/asymmetric/non-finite input and
/// ConvergenceError (carrying the off-diagonal residual) after 64 sweeps.
EigenResult sym_eig(const Matrix& a);

/// Flips each column so its largest-magnitude entry is positive.
void normalize_signs(Matrix& vectors);

struct PrincipalSubspace {
  Matrix basis;                  // d×d′, orthonormal columns
  std::vector<double> variances;  // matching eigenvalues of XᵀX/(N−1)
};

/// Top-`d_prime` eigenvectors of XᵀX/(N−1) for an N×d matrix X. Uses the N×N
/// Gram matrix X·Xᵀ/(N−1) when N < d and the d×d covariance otherwise.
/// Throws DimensionError when d_prime is 0 or exceeds min(N−1, d), and
/// RankError when fewer than d_prime eigenvalues exceed 1e-12·λ_max.
PrincipalSubspace principal_subspace(const Matrix& x, std::size_t d_prime);

/// Basis part of principal_subspace.
Matrix dual_principal_subspace(const Matrix& x, std::size_t d_prime);

/// Solves (AᵀA)·X = AᵀB in the least-squares sense via Cholesky.
Matrix least_squares(const Matrix& a, const Matrix& b);

/// Haar-ish random orthogonal matrix (Gaussian + modified Gram–Schmidt).
Matrix random_orthogonal(std::size_t n, rng::Engine& engine);

/// n×m matrix (n ≥ m) with orthonormal columns.
Matrix random_isometry(std::size_t n, std::size_t m, rng::Engine& engine);

/// In-place modified Gram–Schmidt over columns; returns false if a column
/// collapses to zero.
bool orthonormalize_columns(Matrix& m);

}  // namespace tp::linalg
