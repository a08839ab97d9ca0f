#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dpimg/error.hpp"
#include "dpimg/imageio.hpp"
#include "dpimg/matrix.hpp"

namespace dpimg {

// Mean, retained eigenvalues (non-increasing) and the s x r orthonormal basis
// of a fitted principal-component model.
struct PcaModel {
  std::vector<double> mean;
  std::vector<double> eigenvalues;
  Matrix basis;

  std::size_t dim() const { return mean.size(); }
  std::size_t rank() const { return basis.cols(); }

  bool operator==(const PcaModel&) const = default;
};

// n x d reduced coordinates, one row per image.
struct ReducedBatch {
  Matrix coords;

  std::size_t size() const { return coords.rows(); }
  std::size_t d() const { return coords.cols(); }
};

enum class FitPath {
  kAuto,    // Gram when n < s, direct otherwise
  kGram,    // eigen of the n x n inner-product matrix, mapped back to pixels
  kDirect,  // eigen of the s x s covariance
};

struct FitOptions {
  FitPath path = FitPath::kAuto;
  // Eigenvalues at or below this fraction of the largest are dropped.
  double rank_tolerance = 1e-9;
  JacobiOptions jacobi;
};

namespace detail {

// Two passes of modified Gram-Schmidt over the columns of `v`.
inline void Orthonormalize(Matrix& v) {
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t c = 0; c < v.cols(); ++c) {
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t r = 0; r < v.rows(); ++r) dot += v(r, p) * v(r, c);
        for (std::size_t r = 0; r < v.rows(); ++r) v(r, c) -= dot * v(r, p);
      }
      double norm = 0.0;
      for (std::size_t r = 0; r < v.rows(); ++r) norm += v(r, c) * v(r, c);
      norm = std::sqrt(norm);
      for (std::size_t r = 0; r < v.rows(); ++r) v(r, c) /= norm;
    }
  }
}

inline std::size_t RetainedRank(const std::vector<double>& eigenvalues, std::size_t cap,
                                double tolerance) {
  const double cutoff = tolerance * eigenvalues.front();
  std::size_t r = 0;
  while (r < std::min(cap, eigenvalues.size()) && eigenvalues[r] > cutoff) ++r;
  return r;
}

}  // namespace detail

// Fits the principal components of the rows of `batch` (n x s, raw pixels).
// Covariance is the unnormalized D'D'^T of the centered data.
inline PcaModel Fit(const Matrix& batch, const FitOptions& options = {}) {
  const std::size_t n = batch.rows();
  const std::size_t s = batch.cols();
  Require(n >= 2, "pca fit: need at least 2 images, got " + std::to_string(n));
  Require(s >= 1, "pca fit: empty attribute vectors");
  Require(AllFinite(batch), "pca fit: non-finite input");

  PcaModel model;
  model.mean.assign(s, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = batch.row(i);
    for (std::size_t j = 0; j < s; ++j) model.mean[j] += row[j];
  }
  for (double& m : model.mean) m /= static_cast<double>(n);

  Matrix centered = batch;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = centered.row(i);
    for (std::size_t j = 0; j < s; ++j) row[j] -= model.mean[j];
  }
  if (MaxAbs(centered) == 0.0)
    Fail(ErrorCode::kDegenerate, "pca fit: all images identical, covariance is zero");

  const bool gram = options.path == FitPath::kGram ||
                    (options.path == FitPath::kAuto && n < s);
  const std::size_t cap = std::min(n - 1, s);

  if (gram) {
    const EigenResult eig = SymEigen(OuterGram(centered), options.jacobi);
    if (!(eig.eigenvalues.front() > 0.0))
      Fail(ErrorCode::kDegenerate, "pca fit: non-positive leading eigenvalue");
    const std::size_t r = detail::RetainedRank(eig.eigenvalues, cap, options.rank_tolerance);
    model.basis = Matrix(s, r);
    for (std::size_t c = 0; c < r; ++c) {
      // e = D'^T v / |D'^T v|
      for (std::size_t i = 0; i < n; ++i) {
        const double vi = eig.eigenvectors(i, c);
        auto row = centered.row(i);
        for (std::size_t j = 0; j < s; ++j) model.basis(j, c) += vi * row[j];
      }
    }
    detail::Orthonormalize(model.basis);
    model.eigenvalues.assign(eig.eigenvalues.begin(), eig.eigenvalues.begin() + r);
  } else {
    const EigenResult eig = SymEigen(InnerGram(centered), options.jacobi);
    if (!(eig.eigenvalues.front() > 0.0))
      Fail(ErrorCode::kDegenerate, "pca fit: non-positive leading eigenvalue");
    const std::size_t r = detail::RetainedRank(eig.eigenvalues, cap, options.rank_tolerance);
    model.basis = Matrix(s, r);
    for (std::size_t j = 0; j < s; ++j)
      for (std::size_t c = 0; c < r; ++c) model.basis(j, c) = eig.eigenvectors(j, c);
    model.eigenvalues.assign(eig.eigenvalues.begin(), eig.eigenvalues.begin() + r);
  }
  detail::NormalizeColumnSigns(model.basis);
  for (double& l : model.eigenvalues) l = std::max(l, 0.0);
  return model;
}

// Projects raw rows onto the first d components: (x - mean)^T E_d.
inline ReducedBatch Reduce(const PcaModel& model, const Matrix& rows, std::size_t d) {
  Require(d >= 1 && d <= model.rank(),
          "pca reduce: d=" + std::to_string(d) + " outside [1, rank=" +
              std::to_string(model.rank()) + "]");
  Require(rows.cols() == model.dim(), "pca reduce: rows have " + std::to_string(rows.cols()) +
                                          " attributes, model expects " +
                                          std::to_string(model.dim()));
  const std::size_t s = model.dim();
  ReducedBatch out{Matrix(rows.rows(), d)};
  std::vector<double> centered(s);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    auto row = rows.row(i);
    for (std::size_t j = 0; j < s; ++j) centered[j] = row[j] - model.mean[j];
    auto dst = out.coords.row(i);
    for (std::size_t j = 0; j < s; ++j) {
      const double cj = centered[j];
      auto bj = model.basis.row(j);
      for (std::size_t c = 0; c < d; ++c) dst[c] += cj * bj[c];
    }
  }
  return out;
}

namespace detail {

// Cholesky factor-solve of E E^T + lambda I in long double. The system has
// eigenvalues 1 + lambda on range(E) and lambda off it, so rounding that
// leaks off range(E) is amplified by 1/lambda; extended precision keeps that
// leak below the double-precision result.
class RegularizedProjectorSolver {
 public:
  RegularizedProjectorSolver(const Matrix& basis_d, double lambda)
      : n_(basis_d.rows()), d_(basis_d.cols()), basis_(n_ * d_), lower_(n_ * n_) {
    for (std::size_t k = 0; k < basis_.size(); ++k) basis_[k] = basis_d.data()[k];
    for (std::size_t j = 0; j < n_; ++j) {
      long double* lj = &lower_[j * n_];
      long double diag = Gram(j, j) + lambda;
      for (std::size_t k = 0; k < j; ++k) diag -= lj[k] * lj[k];
      if (!(diag > 0.0L))
        Fail(ErrorCode::kSingular, "pca inverse: non-positive pivot at row " + std::to_string(j));
      lj[j] = std::sqrt(diag);
      for (std::size_t i = j + 1; i < n_; ++i) {
        long double* li = &lower_[i * n_];
        long double sum = Gram(i, j);
        for (std::size_t k = 0; k < j; ++k) sum -= li[k] * lj[k];
        li[j] = sum / lj[j];
      }
    }
  }

  // x = (E E^T + lambda I)^{-1} E z.
  void Solve(std::span<const double> z, std::span<double> x) const {
    std::vector<long double> b(n_);
    for (std::size_t j = 0; j < n_; ++j) {
      long double acc = 0.0L;
      for (std::size_t c = 0; c < d_; ++c) acc += basis_[j * d_ + c] * z[c];
      b[j] = acc;
    }
    for (std::size_t i = 0; i < n_; ++i) {
      long double sum = b[i];
      for (std::size_t k = 0; k < i; ++k) sum -= lower_[i * n_ + k] * b[k];
      b[i] = sum / lower_[i * n_ + i];
    }
    for (std::size_t i = n_; i-- > 0;) {
      long double sum = b[i];
      for (std::size_t k = i + 1; k < n_; ++k) sum -= lower_[k * n_ + i] * b[k];
      b[i] = sum / lower_[i * n_ + i];
    }
    for (std::size_t j = 0; j < n_; ++j) x[j] = static_cast<double>(b[j]);
  }

 private:
  long double Gram(std::size_t i, std::size_t j) const {
    long double acc = 0.0L;
    for (std::size_t c = 0; c < d_; ++c) acc += basis_[i * d_ + c] * basis_[j * d_ + c];
    return acc;
  }

  std::size_t n_, d_;
  std::vector<long double> basis_;
  std::vector<long double> lower_;
};

}  // namespace detail

enum class InversePath {
  kAuto,         // push-through above kInverseFactorSolveLimit attributes
  kFactorSolve,  // extended-precision Cholesky of the s x s E_d E_d^T + lambda I
  kPushThrough,  // E_d (E_d^T E_d + lambda I)^{-1} z, a d x d solve
};

inline constexpr std::size_t kInverseFactorSolveLimit = 512;

// Regularized back-projection: x^T = z E_d^T (E_d E_d^T + lambda I)^{-1} + mean.
//
// The s x s route factors the regularized matrix once per call. The d x d
// route uses E^T (E E^T + lambda I)^{-1} = (E^T E + lambda I)^{-1} E^T, which
// for orthonormal E collapses to the (P + lambda I)^{-1} = P/(1+lambda) +
// (I-P)/lambda split restricted to range(E). Both agree to rounding.
inline Matrix Inverse(const PcaModel& model, const ReducedBatch& reduced, double lambda_inv,
                      InversePath path = InversePath::kAuto) {
  Require(lambda_inv > 0.0 && std::isfinite(lambda_inv),
          "pca inverse: lambda_inv must be positive, got " + std::to_string(lambda_inv));
  const std::size_t d = reduced.d();
  const std::size_t s = model.dim();
  Require(d >= 1 && d <= model.rank(),
          "pca inverse: d=" + std::to_string(d) + " outside [1, rank=" +
              std::to_string(model.rank()) + "]");

  Matrix basis_d(s, d);
  for (std::size_t j = 0; j < s; ++j)
    for (std::size_t c = 0; c < d; ++c) basis_d(j, c) = model.basis(j, c);

  if (path == InversePath::kAuto)
    path = s > kInverseFactorSolveLimit ? InversePath::kPushThrough : InversePath::kFactorSolve;

  const std::size_t n = reduced.size();
  Matrix out(n, s);
  if (path == InversePath::kFactorSolve) {
    const detail::RegularizedProjectorSolver solver(basis_d, lambda_inv);
    for (std::size_t i = 0; i < n; ++i) solver.Solve(reduced.coords.row(i), out.row(i));
  } else {
    Matrix small = InnerGram(basis_d);
    for (std::size_t c = 0; c < d; ++c) small(c, c) += lambda_inv;
    const Cholesky factor(small);
    std::vector<double> w(d);
    for (std::size_t i = 0; i < n; ++i) {
      auto z = reduced.coords.row(i);
      std::copy(z.begin(), z.end(), w.begin());
      factor.SolveInPlace(w);
      auto x = out.row(i);
      for (std::size_t j = 0; j < s; ++j) {
        auto bj = basis_d.row(j);
        x[j] = std::inner_product(bj.begin(), bj.end(), w.begin(), 0.0);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto x = out.row(i);
    for (std::size_t j = 0; j < s; ++j) x[j] += model.mean[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary container: "PCADP1", u32 s, u32 r, mean[s], eigenvalues[r],
// basis[s*r] row-major; all little-endian, floats as IEEE-754 binary64.

inline constexpr std::array<char, 6> kPcaMagic = {'P', 'C', 'A', 'D', 'P', '1'};

inline std::vector<std::uint8_t> EncodePcaModel(const PcaModel& model) {
  Require(model.eigenvalues.size() == model.rank() && model.basis.rows() == model.dim(),
          "pca encode: inconsistent model");
  std::vector<std::uint8_t> out(kPcaMagic.begin(), kPcaMagic.end());
  auto put_u32 = [&](std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  };
  auto put_f64 = [&](double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
  };
  put_u32(static_cast<std::uint32_t>(model.dim()));
  put_u32(static_cast<std::uint32_t>(model.rank()));
  for (double v : model.mean) put_f64(v);
  for (double v : model.eigenvalues) put_f64(v);
  for (double v : model.basis.data()) put_f64(v);
  return out;
}

inline PcaModel DecodePcaModel(std::span<const std::uint8_t> bytes,
                               const std::string& name = "pca model") {
  if (bytes.size() < 14 || !std::equal(kPcaMagic.begin(), kPcaMagic.end(), bytes.begin()))
    Fail(ErrorCode::kFormat, name + ": missing PCADP1 magic at byte offset 0");
  std::size_t pos = 6;
  auto get_u32 = [&] {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= std::uint32_t{bytes[pos + b]} << (8 * b);
    pos += 4;
    return v;
  };
  const std::size_t s = get_u32();
  const std::size_t r = get_u32();
  const std::size_t expected = 14 + 8 * (s + r + s * r);
  if (bytes.size() != expected) {
    Fail(ErrorCode::kFormat, name + ": size " + std::to_string(bytes.size()) +
                                 " bytes, header at byte offset 6 implies " +
                                 std::to_string(expected));
  }
  auto get_f64 = [&] {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t{bytes[pos + b]} << (8 * b);
    pos += 8;
    return std::bit_cast<double>(bits);
  };
  PcaModel model;
  model.mean.resize(s);
  model.eigenvalues.resize(r);
  model.basis = Matrix(s, r);
  for (double& v : model.mean) v = get_f64();
  for (double& v : model.eigenvalues) v = get_f64();
  for (double& v : model.basis.data()) v = get_f64();
  return model;
}

inline void SavePcaModel(const PcaModel& model, const std::filesystem::path& path) {
  WriteFileBytes(path, EncodePcaModel(model));
}

inline PcaModel LoadPcaModel(const std::filesystem::path& path) {
  return DecodePcaModel(ReadFileBytes(path), path.string());
}

}  // namespace dpimg
