#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gpca/error.hpp"
#include "gpca/types.hpp"

namespace gpca {

/// Ordered sequence of equally shaped real matrices (one observation per
/// time point). Also used for factor series (k1 x k2 per period).
class MatrixSeries {
 public:
  MatrixSeries() = default;

  explicit MatrixSeries(std::vector<Matrix> data) : data_(std::move(data)) {
    if (data_.empty()) throw DimensionError("MatrixSeries: series must be non-empty");
    const Index r = data_.front().rows(), c = data_.front().cols();
    if (r < 1 || c < 1) throw DimensionError("MatrixSeries: matrices must be non-empty");
    for (const Matrix& m : data_) {
      if (m.rows() != r || m.cols() != c)
        throw DimensionError("MatrixSeries: inconsistent matrix shapes");
      if (!m.allFinite()) throw DataError("MatrixSeries: non-finite entries");
    }
  }

  Index size() const { return static_cast<Index>(data_.size()); }
  Index rows() const { return data_.front().rows(); }
  Index cols() const { return data_.front().cols(); }

  const Matrix& operator[](Index t) const { return data_[static_cast<std::size_t>(t)]; }
  Matrix& operator[](Index t) { return data_[static_cast<std::size_t>(t)]; }

  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  const std::vector<Matrix>& data() const { return data_; }

 private:
  std::vector<Matrix> data_;
};

enum class Identification { raw, whitened };

/// A p x k loading matrix together with its identification convention:
/// `whitened` marks loadings living on the noise-whitened scale (columns
/// orthogonal with squared norm p), `raw` marks loadings on the
/// observation scale.
struct LoadingMatrix {
  Matrix values;
  Identification identification = Identification::raw;

  LoadingMatrix() = default;
  LoadingMatrix(Matrix v, Identification id) : values(std::move(v)), identification(id) {
    if (values.cols() > values.rows())
      throw DimensionError("LoadingMatrix: more factors than variables");
    if (values.cols() < 1) throw DimensionError("LoadingMatrix: needs at least one column");
    if (!values.allFinite()) throw DataError("LoadingMatrix: non-finite entries");
  }

  Index dimension() const { return values.rows(); }
  Index n_factors() const { return values.cols(); }
};

/// Separable noise covariance: Cov(vec(E_t)) = col_cov (x) row_cov, known
/// only up to a positive scalar traded between the two factors.
struct SeparableCovariance {
  Matrix row_cov;  // p1 x p1
  Matrix col_cov;  // p2 x p2
  std::string scale_convention;

  SeparableCovariance() = default;
  SeparableCovariance(Matrix u, Matrix v, std::string convention = {})
      : row_cov(std::move(u)), col_cov(std::move(v)), scale_convention(std::move(convention)) {
    check(row_cov, "row");
    check(col_cov, "column");
  }

  static SeparableCovariance identity(Index p1, Index p2) {
    return SeparableCovariance(Matrix::Identity(p1, p1), Matrix::Identity(p2, p2),
                               "identity");
  }

 private:
  static void check(const Matrix& m, const char* side) {
    if (m.rows() != m.cols())
      throw DimensionError(std::string("SeparableCovariance: ") + side +
                           " covariance is not square");
    if (!m.allFinite())
      throw DataError(std::string("SeparableCovariance: ") + side +
                      " covariance has non-finite entries");
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10)
      throw SymmetryError(std::string("SeparableCovariance: ") + side +
                          " covariance is not symmetric");
  }
};

enum class Method { alpha_pca, pe, oracle_gpca, gpca };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::alpha_pca: return "alpha_pca";
    case Method::pe: return "pe";
    case Method::oracle_gpca: return "oracle";
    case Method::gpca: return "gpca";
  }
  return "?";
}

/// Per-iteration aggregates of the eigen-iteration: `row` is the p1 x p1
/// matrix whose leading eigenvectors update the whitened row loadings,
/// `col` the p2 x p2 counterpart.
struct AggregationMatrices {
  Matrix row;
  Matrix col;
};

/// Full output of one estimation run.
struct EstimationResult {
  LoadingMatrix row_loading;           // raw scale
  LoadingMatrix col_loading;           // raw scale
  LoadingMatrix row_loading_whitened;  // sqrt(p1) * orthonormal basis
  LoadingMatrix col_loading_whitened;
  MatrixSeries factors;    // k1 x k2 per period
  MatrixSeries common;     // fitted common components
  MatrixSeries residuals;  // observation minus common component
  Method method = Method::pe;
  int iterations = 0;
  double final_step_distance = 0.0;
  bool converged = true;
  std::vector<double> objective_trace;  // whitened squared loss per sweep
  std::vector<std::string> warnings;
};

}  // namespace gpca
