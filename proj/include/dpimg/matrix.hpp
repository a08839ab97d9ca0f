#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpimg/error.hpp"

namespace dpimg {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    Require(data_.size() == rows_ * cols_,
            "matrix data length " + std::to_string(data_.size()) +
                " does not match " + std::to_string(rows_) + "x" +
                std::to_string(cols_));
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      Require(row.size() == cols_, "ragged matrix literal");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix Identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool square() const { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double> column(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool AllFinite(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(),
                     [](double v) { return std::isfinite(v); });
}

inline double MaxAbs(const Matrix& m) {
  double best = 0.0;
  for (double v : m.data()) best = std::max(best, std::abs(v));
  return best;
}

inline double FrobeniusNorm(const Matrix& m) {
  double sum = 0.0;
  for (double v : m.data()) sum += v * v;
  return std::sqrt(sum);
}

inline Matrix Transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

inline Matrix Subtract(const Matrix& a, const Matrix& b) {
  Require(a.rows() == b.rows() && a.cols() == b.cols(),
          "subtract: shape mismatch");
  Matrix out = a;
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

inline Matrix MatMul(const Matrix& a, const Matrix& b) {
  Require(a.cols() == b.rows(),
          "mat_mul: dimension mismatch " + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " times " + std::to_string(b.rows()) +
              "x" + std::to_string(b.cols()));
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  Require(AllFinite(out), "mat_mul: product overflowed");
  return out;
}

// x * x^T, filled symmetrically so the result is exactly symmetric.
inline Matrix OuterGram(const Matrix& x) {
  Matrix g(x.rows(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    for (std::size_t j = 0; j <= i; ++j) {
      g(i, j) = g(j, i) = std::inner_product(xi.begin(), xi.end(),
                                             x.row(j).begin(), 0.0);
    }
  }
  return g;
}

// x^T * x, exactly symmetric.
inline Matrix InnerGram(const Matrix& x) {
  const std::size_t s = x.cols();
  Matrix c(s, s);
  for (std::size_t k = 0; k < x.rows(); ++k) {
    auto xk = x.row(k);
    for (std::size_t i = 0; i < s; ++i) {
      const double v = xk[i];
      if (v == 0.0) continue;
      auto ci = c.row(i);
      for (std::size_t j = 0; j <= i; ++j) ci[j] += v * xk[j];
    }
  }
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < i; ++j) c(j, i) = c(i, j);
  return c;
}

struct EigenResult {
  std::vector<double> eigenvalues;  // non-increasing
  Matrix eigenvectors;              // column i pairs with eigenvalue i
};

struct JacobiOptions {
  double relative_tolerance = 1e-12;  // on ||offdiag||_F / ||S||_F
  int max_sweeps = 100;
};

namespace detail {

inline double OffDiagonalNorm(const Matrix& a) {
  double sum = 0.0;
  for (std::size_t p = 0; p < a.rows(); ++p)
    for (std::size_t q = p + 1; q < a.cols(); ++q) sum += a(p, q) * a(p, q);
  return std::sqrt(2.0 * sum);
}

// Flips each column so its largest-magnitude entry (first on ties) is positive.
inline void NormalizeColumnSigns(Matrix& v) {
  for (std::size_t c = 0; c < v.cols(); ++c) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t r = 0; r < v.rows(); ++r) {
      if (std::abs(v(r, c)) > best) {
        best = std::abs(v(r, c));
        arg = r;
      }
    }
    if (v.rows() > 0 && v(arg, c) < 0.0)
      for (std::size_t r = 0; r < v.rows(); ++r) v(r, c) = -v(r, c);
  }
}

}  // namespace detail

// Symmetric eigendecomposition by cyclic Jacobi rotations.
//
// Input asymmetry up to 1e-9 * max(1, |S|_max) is absorbed by averaging S and
// S^T. Eigenvalues come back non-increasing (stable on ties); each
// eigenvector's largest-magnitude entry is positive, so repeated calls on the
// same input are bit-identical.
inline EigenResult SymEigen(const Matrix& s, const JacobiOptions& options = {}) {
  Require(s.square(), "sym_eigen: matrix is " + std::to_string(s.rows()) + "x" +
                          std::to_string(s.cols()) + ", expected square");
  Require(AllFinite(s), "sym_eigen: non-finite entry");
  const std::size_t n = s.rows();
  const double scale = std::max(1.0, MaxAbs(s));
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Require(std::abs(s(i, j) - s(j, i)) <= 1e-9 * scale,
              "sym_eigen: matrix is not symmetric");
      a(i, j) = 0.5 * (s(i, j) + s(j, i));
    }
  }

  Matrix v = Matrix::Identity(n);
  const double threshold = options.relative_tolerance * FrobeniusNorm(a);
  double off = detail::OffDiagonalNorm(a);
  int sweep = 0;
  while (off > threshold) {
    if (sweep == options.max_sweeps) {
      throw ConvergenceError("sym_eigen: no convergence after " +
                                 std::to_string(sweep) +
                                 " sweeps, off-diagonal norm " +
                                 std::to_string(off),
                             off);
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        double t;
        if (std::abs(theta) > 1e150) {
          t = 0.5 / theta;
        } else {
          t = (theta >= 0.0 ? 1.0 : -1.0) /
              (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        }
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
    ++sweep;
    off = detail::OffDiagonalNorm(a);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return a(i, i) > a(j, j);
  });

  EigenResult result;
  result.eigenvalues.resize(n);
  result.eigenvectors = Matrix(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    result.eigenvalues[c] = a(order[c], order[c]);
    for (std::size_t r = 0; r < n; ++r)
      result.eigenvectors(r, c) = v(r, order[c]);
  }
  detail::NormalizeColumnSigns(result.eigenvectors);
  return result;
}

// Cholesky factor A = L L^T of a symmetric positive-definite matrix. Factor
// once, then solve against as many right-hand sides as needed.
class Cholesky {
 public:
  explicit Cholesky(const Matrix& a) : lower_(a.rows(), a.cols()) {
    Require(a.square(), "spd_solve: matrix is not square");
    const std::size_t n = a.rows();
    const double scale = std::max(1.0, MaxAbs(a));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j)
        Require(std::abs(a(i, j) - a(j, i)) <= 1e-9 * scale,
                "spd_solve: matrix is not symmetric");

    for (std::size_t j = 0; j < n; ++j) {
      auto lj = lower_.row(j);
      double diag = a(j, j);
      for (std::size_t k = 0; k < j; ++k) diag -= lj[k] * lj[k];
      if (!(diag > 0.0)) {
        Fail(ErrorCode::kSingular,
             "spd_solve: non-positive pivot " + std::to_string(diag) +
                 " at row " + std::to_string(j));
      }
      const double ljj = std::sqrt(diag);
      lj[j] = ljj;
      for (std::size_t i = j + 1; i < n; ++i) {
        auto li = lower_.row(i);
        double sum = a(i, j);
        for (std::size_t k = 0; k < j; ++k) sum -= li[k] * lj[k];
        li[j] = sum / ljj;
      }
    }
  }

  std::size_t size() const { return lower_.rows(); }

  // Solves A x = b in place.
  void SolveInPlace(std::span<double> b) const {
    const std::size_t n = size();
    Require(b.size() == n, "spd_solve: right-hand side length mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      auto li = lower_.row(i);
      double sum = b[i];
      for (std::size_t k = 0; k < i; ++k) sum -= li[k] * b[k];
      b[i] = sum / li[i];
    }
    for (std::size_t i = n; i-- > 0;) {
      double sum = b[i];
      for (std::size_t k = i + 1; k < n; ++k) sum -= lower_(k, i) * b[k];
      b[i] = sum / lower_(i, i);
    }
  }

  Matrix Solve(const Matrix& b) const {
    Require(b.rows() == size(), "spd_solve: a.rows != b.rows");
    Matrix x(b.rows(), b.cols());
    std::vector<double> col(b.rows());
    for (std::size_t c = 0; c < b.cols(); ++c) {
      for (std::size_t r = 0; r < b.rows(); ++r) col[r] = b(r, c);
      SolveInPlace(col);
      for (std::size_t r = 0; r < b.rows(); ++r) x(r, c) = col[r];
    }
    return x;
  }

 private:
  Matrix lower_;
};

inline Matrix SpdSolve(const Matrix& a, const Matrix& b) {
  Require(a.rows() == b.rows(), "spd_solve: a.rows != b.rows");
  return Cholesky(a).Solve(b);
}

}  // namespace dpimg
