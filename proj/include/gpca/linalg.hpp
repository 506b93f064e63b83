#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "gpca/error.hpp"
#include "gpca/types.hpp"

namespace gpca {

/// Eigenpairs of a symmetric matrix, eigenvalues sorted non-increasing.
/// Each eigenvector is sign-fixed: its entry of largest magnitude is
/// positive, ties broken toward the lowest index.
template <typename Scalar>
struct SpectralDecomposition {
  DenseVector<Scalar> eigenvalues;
  DenseMatrix<Scalar> eigenvectors;
};

namespace detail {

template <typename Scalar>
void fix_eigenvector_signs(DenseMatrix<Scalar>& q) {
  for (Index j = 0; j < q.cols(); ++j) {
    Index arg = 0;
    Scalar best = std::abs(q(0, j));
    for (Index i = 1; i < q.rows(); ++i) {
      const Scalar a = std::abs(q(i, j));
      if (a > best) {
        best = a;
        arg = i;
      }
    }
    if (q(arg, j) < Scalar(0)) q.col(j) = -q.col(j);
  }
}

template <typename Derived>
void require_square_symmetric(const Eigen::MatrixBase<Derived>& s, const char* who) {
  using Scalar = typename Derived::Scalar;
  if (s.rows() != s.cols())
    throw DimensionError(std::string(who) + ": matrix is not square");
  if (!s.derived().allFinite())
    throw DataError(std::string(who) + ": matrix has non-finite entries");
  const Scalar scale = s.derived().cwiseAbs().maxCoeff();
  const Scalar asym = (s.derived() - s.derived().transpose()).cwiseAbs().maxCoeff();
  if (asym > Scalar(1e-8) * scale)
    throw SymmetryError(std::string(who) + ": matrix is not symmetric within tolerance");
}

// Full spectral decomposition, eigenvalues non-increasing, signs fixed.
template <typename Derived>
SpectralDecomposition<typename Derived::Scalar> sym_eig_full(
    const Eigen::MatrixBase<Derived>& s, const char* who) {
  using Scalar = typename Derived::Scalar;
  require_square_symmetric(s, who);
  const DenseMatrix<Scalar> sym = Scalar(0.5) * (s.derived() + s.derived().transpose());
  Eigen::SelfAdjointEigenSolver<DenseMatrix<Scalar>> solver(sym);
  if (solver.info() != Eigen::Success)
    throw Error(std::string(who) + ": eigensolver failed to converge");
  const Index p = sym.rows();
  SpectralDecomposition<Scalar> dec;
  dec.eigenvalues = solver.eigenvalues().reverse();
  dec.eigenvectors.resize(p, p);
  for (Index j = 0; j < p; ++j) dec.eigenvectors.col(j) = solver.eigenvectors().col(p - 1 - j);
  fix_eigenvector_signs(dec.eigenvectors);
  return dec;
}

}  // namespace detail

/// Top-k eigenpairs of a symmetric matrix.
template <typename Derived>
SpectralDecomposition<typename Derived::Scalar> sym_eig_topk(
    const Eigen::MatrixBase<Derived>& s, Index k) {
  if (k < 1 || k > s.rows())
    throw DimensionError("sym_eig_topk: k must satisfy 1 <= k <= p");
  auto dec = detail::sym_eig_full(s, "sym_eig_topk");
  dec.eigenvalues.conservativeResize(k);
  dec.eigenvectors.conservativeResize(Eigen::NoChange, k);
  return dec;
}

/// Powers of an SPD matrix obtained from a single spectral decomposition.
template <typename Scalar>
struct SpdPowers {
  DenseMatrix<Scalar> sqrt;
  DenseMatrix<Scalar> inv_sqrt;
  DenseMatrix<Scalar> inverse;
  Scalar lambda_min;
};

template <typename Derived>
SpdPowers<typename Derived::Scalar> spd_powers(const Eigen::MatrixBase<Derived>& s,
                                               double pd_tolerance = 1e-10) {
  using Scalar = typename Derived::Scalar;
  const auto dec = detail::sym_eig_full(s, "spd_powers");
  const Scalar lmin = dec.eigenvalues(dec.eigenvalues.size() - 1);
  if (!(lmin > Scalar(pd_tolerance)))
    throw NotPositiveDefiniteError(
        "spd_powers: smallest eigenvalue " + std::to_string(static_cast<double>(lmin)) +
            " is not above the positive-definiteness tolerance",
        static_cast<double>(lmin));
  const DenseVector<Scalar> root = dec.eigenvalues.cwiseSqrt();
  SpdPowers<Scalar> out;
  out.sqrt = dec.eigenvectors * root.asDiagonal() * dec.eigenvectors.transpose();
  out.inv_sqrt = dec.eigenvectors * root.cwiseInverse().asDiagonal() * dec.eigenvectors.transpose();
  out.inverse = dec.eigenvectors * dec.eigenvalues.cwiseInverse().asDiagonal() *
                dec.eigenvectors.transpose();
  out.sqrt = Scalar(0.5) * (out.sqrt + out.sqrt.transpose()).eval();
  out.inv_sqrt = Scalar(0.5) * (out.inv_sqrt + out.inv_sqrt.transpose()).eval();
  out.inverse = Scalar(0.5) * (out.inverse + out.inverse.transpose()).eval();
  out.lambda_min = lmin;
  return out;
}

/// Symmetric square root of an SPD matrix.
template <typename Derived>
DenseMatrix<typename Derived::Scalar> spd_sqrt(const Eigen::MatrixBase<Derived>& s,
                                               double pd_tolerance = 1e-10) {
  return spd_powers(s, pd_tolerance).sqrt;
}

/// Symmetric inverse square root of an SPD matrix.
template <typename Derived>
DenseMatrix<typename Derived::Scalar> spd_inv_sqrt(const Eigen::MatrixBase<Derived>& s,
                                                   double pd_tolerance = 1e-10) {
  return spd_powers(s, pd_tolerance).inv_sqrt;
}

/// Gram-Schmidt orthonormalization preserving the column span.
/// Rank deficiency (a residual column of norm below 1e-12 during
/// elimination) raises RankError.
template <typename Derived>
DenseMatrix<typename Derived::Scalar> orthonormalize(const Eigen::MatrixBase<Derived>& q_in) {
  using Scalar = typename Derived::Scalar;
  if (q_in.rows() < q_in.cols())
    throw DimensionError("orthonormalize: more columns than rows");
  if (!q_in.derived().allFinite())
    throw DataError("orthonormalize: matrix has non-finite entries");
  DenseMatrix<Scalar> q = q_in.derived();
  const Index n = q.cols();
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < j; ++i) q.col(j) -= q.col(i).dot(q.col(j)) * q.col(i);
    const Scalar norm = q.col(j).norm();
    if (norm < Scalar(1e-12))
      throw RankError("orthonormalize: column " + std::to_string(j) +
                      " is numerically dependent on earlier columns");
    q.col(j) /= norm;
  }
  // Second pass tightens orthogonality for ill-conditioned inputs.
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < j; ++i) q.col(j) -= q.col(i).dot(q.col(j)) * q.col(i);
    q.col(j) /= q.col(j).norm();
  }
  return q;
}

/// Distance in [0,1] between the column spans of two matrices:
/// sqrt(1 - Tr(Q1 Q1' Q2 Q2') / min(q1, q2)) after orthonormalizing both.
/// 0 for equal spans, 1 for orthogonal spans.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar subspace_distance(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.rows() != b.rows())
    throw DimensionError("subspace_distance: row counts differ");
  const DenseMatrix<Scalar> qa = orthonormalize(a);
  const DenseMatrix<Scalar> qb = orthonormalize(b);
  const Scalar overlap = (qa.transpose() * qb).squaredNorm();
  const Scalar q = static_cast<Scalar>(std::min(a.cols(), b.cols()));
  const Scalar inside = std::clamp(Scalar(1) - overlap / q, Scalar(0), Scalar(1));
  return std::sqrt(inside);
}

/// Kronecker product a (x) b.
template <typename DerivedA, typename DerivedB>
DenseMatrix<typename DerivedA::Scalar> kronecker(const Eigen::MatrixBase<DerivedA>& a,
                                                 const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  DenseMatrix<Scalar> out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b.derived();
  return out;
}

}  // namespace gpca
