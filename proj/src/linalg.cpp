#include "tp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tp/error.hpp"
#include "tp/rng.hpp"

namespace tp::linalg {

namespace {

constexpr double kOffDiagonalTolerance = 1e-12;
constexpr int kMaxSweeps = 64;
constexpr double kSymmetryTolerance = 1e-9;
constexpr double kRankEpsilon = 1e-12;

void check_finite(const Matrix& a, const char* what) {
  for (double v : a.data()) {
    if (!std::isfinite(v)) throw ContractViolation(std::string(what) + ": non-finite entry");
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::vector<double> Matrix::col(std::size_t c) const {
  std::vector<double> out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimensionError("matmul_tn: row counts differ");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: column counts differ");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      out(i, j) = s;
    }
  }
  return out;
}

std::vector<double> vecmat(std::span<const double> x, const Matrix& a) {
  if (x.size() != a.rows()) throw DimensionError("vecmat: length mismatch");
  std::vector<double> out(a.cols(), 0.0);
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double xk = x[k];
    if (xk == 0.0) continue;
    auto arow = a.row(k);
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += xk * arow[j];
  }
  return out;
}

double frobenius_norm(std::span<const double> v) {
  // Scaled accumulation so huge/tiny entries neither overflow nor underflow.
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) return 0.0;
  double sum = 0.0;
  for (double x : v) {
    const double y = x / scale;
    sum += y * y;
  }
  return scale * std::sqrt(sum);
}

double frobenius_norm(const Matrix& m) { return frobenius_norm(m.data()); }

double max_abs(const Matrix& m) {
  double out = 0.0;
  for (double v : m.data()) out = std::max(out, std::abs(v));
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("subtract: shape mismatch");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

double orthonormality_error(const Matrix& q) {
  Matrix g = matmul_tn(q, q);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return max_abs(g);
}

void normalize_signs(Matrix& vectors) {
  for (std::size_t c = 0; c < vectors.cols(); ++c) {
    std::size_t best = 0;
    double best_mag = -1.0;
    for (std::size_t r = 0; r < vectors.rows(); ++r) {
      const double mag = std::abs(vectors(r, c));
      if (mag > best_mag) {
        best_mag = mag;
        best = r;
      }
    }
    if (vectors.rows() > 0 && vectors(best, c) < 0.0) {
      for (std::size_t r = 0; r < vectors.rows(); ++r) vectors(r, c) = -vectors(r, c);
    }
  }
}

EigenResult sym_eig(const Matrix& input) {
  const std::size_t n = input.rows();
  if (input.cols() != n) throw ContractViolation("sym_eig: matrix is not square");
  check_finite(input, "sym_eig");
  const double norm = frobenius_norm(input);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(input(i, j) - input(j, i)) > kSymmetryTolerance * std::max(norm, 1e-300)) {
        throw ContractViolation("sym_eig: matrix is not symmetric at (" + std::to_string(i) + ", " +
                                std::to_string(j) + ")");
      }
    }
  }

  // Work on the symmetrized copy; vt holds eigenvectors as rows so rotations
  // touch contiguous memory.
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (input(i, j) + input(j, i));
  Matrix vt = Matrix::identity(n);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
    return std::sqrt(2.0 * s);
  };

  const double target = kOffDiagonalTolerance * norm;
  double off = off_norm();
  int sweep = 0;
  while (off > target) {
    if (sweep == kMaxSweeps) {
      throw ConvergenceError("sym_eig: no convergence after " + std::to_string(kMaxSweeps) +
                                 " sweeps",
                             norm > 0.0 ? off / norm : off);
    }
    // Early sweeps skip entries that are small relative to the current
    // off-diagonal mass.
    const double skip = sweep < 3 ? 0.2 * off / static_cast<double>(n * n) : 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0 || std::abs(apq) < skip) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;

        double* rp = a.row(p).data();
        double* rq = a.row(q).data();
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = rp[k];
          const double akq = rq[k];
          rp[k] = c * akp - s * akq;
          rq[k] = s * akp + c * akq;
        }
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          a(k, p) = rp[k];
          a(k, q) = rq[k];
        }

        auto vp = vt.row(p);
        auto vq = vt.row(q);
        for (std::size_t k = 0; k < n; ++k) {
          const double x = vp[k];
          const double y = vq[k];
          vp[k] = c * x - s * y;
          vq[k] = s * x + c * y;
        }
      }
    }
    ++sweep;
    off = off_norm();
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  EigenResult out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    auto v = vt.row(order[j]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, j) = v[r];
  }
  normalize_signs(out.vectors);
  return out;
}

bool orthonormalize_columns(Matrix& m) {
  for (std::size_t j = 0; j < m.cols(); ++j) {
    for (std::size_t i = 0; i < j; ++i) {
      double dot = 0.0;
      for (std::size_t r = 0; r < m.rows(); ++r) dot += m(r, i) * m(r, j);
      for (std::size_t r = 0; r < m.rows(); ++r) m(r, j) -= dot * m(r, i);
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) norm += m(r, j) * m(r, j);
    norm = std::sqrt(norm);
    if (norm == 0.0) return false;
    for (std::size_t r = 0; r < m.rows(); ++r) m(r, j) /= norm;
  }
  return true;
}

namespace {

std::size_t numerical_rank(const std::vector<double>& values) {
  if (values.empty() || !(values.front() > 0.0)) return 0;
  const double cutoff = kRankEpsilon * values.front();
  std::size_t rank = 0;
  for (double v : values) {
    if (v > cutoff) ++rank;
  }
  return rank;
}

}  // namespace

PrincipalSubspace principal_subspace(const Matrix& x, std::size_t d_prime) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n < 2) throw DimensionError("principal_subspace: need at least 2 rows");
  const std::size_t limit = std::min(n - 1, d);
  if (d_prime == 0 || d_prime > limit) {
    throw DimensionError("principal_subspace: d' = " + std::to_string(d_prime) +
                         " outside [1, min(N-1, d) = " + std::to_string(limit) + "]");
  }
  check_finite(x, "principal_subspace");
  const double denom = static_cast<double>(n - 1);

  PrincipalSubspace out;
  if (d <= n) {
    Matrix cov = matmul_tn(x, x);
    for (double& v : cov.data()) v /= denom;
    EigenResult eig = sym_eig(cov);
    const std::size_t rank = numerical_rank(eig.values);
    if (rank < d_prime) {
      throw RankError("principal_subspace: numerical rank " + std::to_string(rank) + " < d' = " +
                          std::to_string(d_prime),
                      rank);
    }
    out.basis = Matrix(d, d_prime);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d_prime; ++c) out.basis(r, c) = eig.vectors(r, c);
    out.variances.assign(eig.values.begin(), eig.values.begin() + static_cast<long>(d_prime));
    return out;
  }

  // Gram route: if (X Xᵀ/(N−1)) u = λ u then Xᵀu / sqrt(λ (N−1)) is a unit
  // eigenvector of XᵀX/(N−1) with the same eigenvalue.
  Matrix gram = matmul_nt(x, x);
  for (double& v : gram.data()) v /= denom;
  EigenResult eig = sym_eig(gram);
  const std::size_t rank = numerical_rank(eig.values);
  if (rank < d_prime) {
    throw RankError("principal_subspace: numerical rank " + std::to_string(rank) + " < d' = " +
                        std::to_string(d_prime),
                    rank);
  }
  out.basis = Matrix(d, d_prime);
  for (std::size_t c = 0; c < d_prime; ++c) {
    const double scale = 1.0 / std::sqrt(eig.values[c] * denom);
    for (std::size_t k = 0; k < n; ++k) {
      const double u = eig.vectors(k, c) * scale;
      if (u == 0.0) continue;
      auto xrow = x.row(k);
      for (std::size_t r = 0; r < d; ++r) out.basis(r, c) += u * xrow[r];
    }
  }
  // Small eigenvalues amplify rounding in the back-projection; one
  // Gram–Schmidt pass restores orthonormality without changing the span.
  orthonormalize_columns(out.basis);
  normalize_signs(out.basis);
  out.variances.assign(eig.values.begin(), eig.values.begin() + static_cast<long>(d_prime));
  return out;
}

Matrix dual_principal_subspace(const Matrix& x, std::size_t d_prime) {
  return principal_subspace(x, d_prime).basis;
}

Matrix least_squares(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimensionError("least_squares: row counts differ");
  const std::size_t m = a.cols();
  Matrix gram = matmul_tn(a, a);
  Matrix rhs = matmul_tn(a, b);

  // Cholesky: gram = L·Lᵀ
  Matrix l(m, m);
  const double scale = std::max(max_abs(gram), 1e-300);
  for (std::size_t j = 0; j < m; ++j) {
    double diag = gram(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > kRankEpsilon * scale)) {
      throw RankError("least_squares: design matrix is rank deficient", j);
    }
    l(j, j) = std::sqrt(diag);
    for (std::size_t i = j + 1; i < m; ++i) {
      double s = gram(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }

  Matrix out(m, b.cols());
  std::vector<double> y(m);
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = rhs(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
      y[i] = s / l(i, i);
    }
    for (std::size_t ii = m; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < m; ++k) s -= l(k, ii) * out(k, c);
      out(ii, c) = s / l(ii, ii);
    }
  }
  return out;
}

Matrix random_isometry(std::size_t n, std::size_t m, rng::Engine& engine) {
  if (m > n) throw DimensionError("random_isometry: more columns than rows");
  Matrix q(n, m);
  for (double& v : q.data()) v = engine.normal();
  orthonormalize_columns(q);
  orthonormalize_columns(q);
  return q;
}

Matrix random_orthogonal(std::size_t n, rng::Engine& engine) { return random_isometry(n, n, engine); }

}  // namespace tp::linalg
