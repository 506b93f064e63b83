#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gpca/linalg.hpp"
#include "gpca/model.hpp"

namespace gpca {

struct GpcaOptions {
  int max_iter = 100;
  double tol = 1e-6;              // stop when the loading-span step falls below
  double pd_tolerance = 1e-10;    // floor for covariance eigenvalues
  /// Optional initial whitened loadings (sqrt(p)-scaled). When absent the
  /// iteration starts from the second-moment eigenvectors of the whitened
  /// series (alpha-PCA with alpha = 0).
  std::optional<std::pair<Matrix, Matrix>> init;
};

namespace detail {

// Orthonormal bases of the leading second-moment eigenspaces of a series:
// eigenvectors of sum_t X_t X_t' (rows) and sum_t X_t' X_t (columns).
inline std::pair<Matrix, Matrix> second_moment_bases(const MatrixSeries& x, Index k1,
                                                     Index k2) {
  const Index p1 = x.rows(), p2 = x.cols();
  if (k1 < 1 || k1 > p1 || k2 < 1 || k2 > p2)
    throw DimensionError("alpha_pca_init: factor count exceeds dimension");
  Matrix mrow = Matrix::Zero(p1, p1);
  Matrix mcol = Matrix::Zero(p2, p2);
  for (const Matrix& xt : x) {
    mrow.selfadjointView<Eigen::Lower>().rankUpdate(xt);
    mcol.selfadjointView<Eigen::Lower>().rankUpdate(xt.transpose());
  }
  const double scale = 1.0 / double(x.size() * p1 * p2);
  mrow = Matrix(mrow.selfadjointView<Eigen::Lower>()) * scale;
  mcol = Matrix(mcol.selfadjointView<Eigen::Lower>()) * scale;
  return {sym_eig_topk(mrow, k1).eigenvectors, sym_eig_topk(mcol, k2).eigenvectors};
}

inline Matrix factor_from_inverses(const Matrix& x_t, const Matrix& r, const Matrix& c,
                                   const Matrix& u_inv, const Matrix& v_inv) {
  const double scale = 1.0 / double(r.rows() * c.rows());
  return scale * (r.transpose() * u_inv * x_t * v_inv * c);
}

}  // namespace detail

/// Initial whitened loading estimates from the second-moment aggregates
/// (alpha-PCA with alpha = 0: no mean outer-product term).
inline std::pair<LoadingMatrix, LoadingMatrix> alpha_pca_init(const MatrixSeries& x,
                                                              Index k1, Index k2) {
  auto [qr, qc] = detail::second_moment_bases(x, k1, k2);
  return {LoadingMatrix(std::sqrt(double(x.rows())) * qr, Identification::whitened),
          LoadingMatrix(std::sqrt(double(x.cols())) * qc, Identification::whitened)};
}

/// Closed-form factor matrix given loadings and the noise covariance:
/// F_t = R' U^{-1} X_t V^{-1} C / (p1 p2).
inline Matrix closed_form_factor(const Matrix& x_t, const LoadingMatrix& r,
                                 const LoadingMatrix& c, const SeparableCovariance& cov,
                                 double pd_tolerance = 1e-10) {
  if (x_t.rows() != r.dimension() || x_t.cols() != c.dimension() ||
      cov.row_cov.rows() != x_t.rows() || cov.col_cov.rows() != x_t.cols())
    throw DimensionError("closed_form_factor: inconsistent shapes");
  const auto pu = spd_powers(cov.row_cov, pd_tolerance);
  const auto pv = spd_powers(cov.col_cov, pd_tolerance);
  return detail::factor_from_inverses(x_t, r.values, c.values, pu.inverse, pv.inverse);
}

/// Common components S_t = R F_t C'.
inline MatrixSeries common_components(const LoadingMatrix& r, const MatrixSeries& factors,
                                      const LoadingMatrix& c) {
  if (factors.rows() != r.n_factors() || factors.cols() != c.n_factors())
    throw DimensionError("common_components: factor shape does not match loadings");
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(factors.size()));
  for (const Matrix& f : factors) out.push_back(r.values * f * c.values.transpose());
  return MatrixSeries(std::move(out));
}

/// Eigen-iteration aggregates built from a whitened series and whitened
/// loadings of the opposite side.
inline Matrix row_aggregation(const MatrixSeries& z, const Matrix& col_loading_star) {
  const Index p1 = z.rows();
  Matrix acc = Matrix::Zero(p1, p1);
  for (const Matrix& zt : z) acc.selfadjointView<Eigen::Lower>().rankUpdate(zt * col_loading_star);
  return Matrix(acc.selfadjointView<Eigen::Lower>()) / double(z.size() * z.cols());
}

inline Matrix col_aggregation(const MatrixSeries& z, const Matrix& row_loading_star) {
  const Index p2 = z.cols();
  Matrix acc = Matrix::Zero(p2, p2);
  for (const Matrix& zt : z)
    acc.selfadjointView<Eigen::Lower>().rankUpdate(zt.transpose() * row_loading_star);
  return Matrix(acc.selfadjointView<Eigen::Lower>()) / double(z.size() * z.rows());
}

inline AggregationMatrices aggregation_matrices(const MatrixSeries& z,
                                                const Matrix& row_loading_star,
                                                const Matrix& col_loading_star) {
  return {row_aggregation(z, col_loading_star), col_aggregation(z, row_loading_star)};
}

namespace detail {

// Full decomposition plus an eigengap diagnostic for the retained block.
inline SpectralDecomposition<double> leading_with_gap(const Matrix& m, Index k,
                                                      const char* side,
                                                      std::vector<std::string>& warnings,
                                                      bool& warned) {
  auto dec = detail::sym_eig_full(m, "gpca iteration");
  if (!warned && k < m.rows()) {
    const double gap = dec.eigenvalues(k - 1) - dec.eigenvalues(k);
    if (gap < 1e-8 * dec.eigenvalues(0)) {
      warnings.push_back(std::string("small eigengap in the ") + side +
                         " aggregation matrix; retained eigenvectors may be unstable");
      warned = true;
    }
  }
  return dec;
}

struct IterationOutput {
  Matrix q_row, q_col;
  int iterations = 0;
  double final_step = 0.0;
  bool converged = false;
  std::vector<double> objective;
  std::vector<std::string> warnings;
};

// Alternating eigen-iteration on a whitened series. Each sweep refreshes
// the row basis from the current column basis, then the column basis from
// the refreshed row basis, and stops when neither span moves by more than
// tol.
inline IterationOutput whitened_iteration(const MatrixSeries& z, Index k1, Index k2,
                                          Matrix q_row, Matrix q_col, int max_iter,
                                          double tol) {
  IterationOutput out;
  const double t_inv = 1.0 / double(z.size());
  double total = 0.0;
  for (const Matrix& zt : z) total += zt.squaredNorm();

  double explained0 = 0.0;
  for (const Matrix& zt : z) explained0 += (q_row.transpose() * zt * q_col).squaredNorm();
  out.objective.push_back(t_inv * (total - explained0));

  bool warned_row = false, warned_col = false;
  for (int iter = 1; iter <= max_iter; ++iter) {
    const Matrix m_row = row_aggregation(z, std::sqrt(double(z.cols())) * q_col);
    const Matrix q_row_new =
        leading_with_gap(m_row, k1, "row", out.warnings, warned_row)
            .eigenvectors.leftCols(k1);
    const Matrix m_col = col_aggregation(z, std::sqrt(double(z.rows())) * q_row_new);
    const auto dec_col = leading_with_gap(m_col, k2, "column", out.warnings, warned_col);
    const Matrix q_col_new = dec_col.eigenvectors.leftCols(k2);

    const double step = std::max(subspace_distance(q_row_new, q_row),
                                 subspace_distance(q_col_new, q_col));
    q_row = q_row_new;
    q_col = q_col_new;
    out.iterations = iter;
    out.final_step = step;
    // Explained variation after the sweep equals the retained eigenvalue
    // mass of the column aggregate (column basis = its leading eigenvectors).
    out.objective.push_back(t_inv * total - dec_col.eigenvalues.head(k2).sum());
    if (step < tol) {
      out.converged = true;
      break;
    }
  }
  out.q_row = std::move(q_row);
  out.q_col = std::move(q_col);
  return out;
}

inline EstimationResult assemble_result(const MatrixSeries& x, const SpdPowers<double>& pu,
                                        const SpdPowers<double>& pv,
                                        const IterationOutput& it, Method method) {
  const Index p1 = x.rows(), p2 = x.cols();
  const double sp1 = std::sqrt(double(p1)), sp2 = std::sqrt(double(p2));
  EstimationResult res;
  res.row_loading = LoadingMatrix(sp1 * (pu.sqrt * it.q_row), Identification::raw);
  res.col_loading = LoadingMatrix(sp2 * (pv.sqrt * it.q_col), Identification::raw);
  res.row_loading_whitened = LoadingMatrix(sp1 * it.q_row, Identification::whitened);
  res.col_loading_whitened = LoadingMatrix(sp2 * it.q_col, Identification::whitened);

  std::vector<Matrix> factors;
  factors.reserve(static_cast<std::size_t>(x.size()));
  for (const Matrix& xt : x)
    factors.push_back(detail::factor_from_inverses(xt, res.row_loading.values,
                                                   res.col_loading.values, pu.inverse,
                                                   pv.inverse));
  res.factors = MatrixSeries(std::move(factors));
  res.common = common_components(res.row_loading, res.factors, res.col_loading);
  std::vector<Matrix> resid;
  resid.reserve(static_cast<std::size_t>(x.size()));
  for (Index t = 0; t < x.size(); ++t) resid.push_back(x[t] - res.common[t]);
  res.residuals = MatrixSeries(std::move(resid));

  res.method = method;
  res.iterations = it.iterations;
  res.final_step_distance = it.final_step;
  res.converged = it.converged;
  res.objective_trace = it.objective;
  res.warnings = it.warnings;
  return res;
}

inline EstimationResult gpca_with_covariance(const MatrixSeries& x,
                                             const SeparableCovariance& cov, Index k1,
                                             Index k2, const GpcaOptions& opts,
                                             Method method) {
  const Index p1 = x.rows(), p2 = x.cols();
  if (cov.row_cov.rows() != p1 || cov.col_cov.rows() != p2)
    throw DimensionError("oracle_gpca: covariance dimensions do not match the series");
  if (k1 < 1 || k1 > p1 || k2 < 1 || k2 > p2)
    throw DimensionError("oracle_gpca: factor count exceeds dimension");
  if (!(opts.tol > 0.0)) throw ConfigError("oracle_gpca: tol must be positive");
  if (opts.max_iter < 1) throw ConfigError("oracle_gpca: max_iter must be at least 1");

  const auto pu = spd_powers(cov.row_cov, opts.pd_tolerance);
  const auto pv = spd_powers(cov.col_cov, opts.pd_tolerance);

  std::vector<Matrix> zdata;
  zdata.reserve(static_cast<std::size_t>(x.size()));
  for (const Matrix& xt : x) zdata.push_back(pu.inv_sqrt * xt * pv.inv_sqrt);
  const MatrixSeries z(std::move(zdata));

  Matrix q_row, q_col;
  if (opts.init) {
    if (opts.init->first.rows() != p1 || opts.init->first.cols() != k1 ||
        opts.init->second.rows() != p2 || opts.init->second.cols() != k2)
      throw DimensionError("oracle_gpca: initial loadings have the wrong shape");
    q_row = orthonormalize(opts.init->first);
    q_col = orthonormalize(opts.init->second);
  } else {
    std::tie(q_row, q_col) = detail::second_moment_bases(z, k1, k2);
  }

  const auto it = detail::whitened_iteration(z, k1, k2, std::move(q_row), std::move(q_col),
                                             opts.max_iter, opts.tol);
  return assemble_result(x, pu, pv, it, method);
}

}  // namespace detail

/// Alternating eigen-iteration with a known noise covariance.
inline EstimationResult oracle_gpca(const MatrixSeries& x, const SeparableCovariance& cov,
                                    Index k1, Index k2, const GpcaOptions& opts = {}) {
  return detail::gpca_with_covariance(x, cov, k1, k2, opts, Method::oracle_gpca);
}

/// Projected estimation: the identity-covariance special case.
inline EstimationResult pe_estimate(const MatrixSeries& x, Index k1, Index k2,
                                    const GpcaOptions& opts = {}) {
  auto res = detail::gpca_with_covariance(
      x, SeparableCovariance::identity(x.rows(), x.cols()), k1, k2, opts, Method::pe);
  return res;
}

/// One-shot second-moment eigen-analysis (alpha-PCA with alpha = 0) as a
/// standalone estimator, for baseline comparisons.
inline EstimationResult alpha_pca_estimate(const MatrixSeries& x, Index k1, Index k2) {
  const Index p1 = x.rows(), p2 = x.cols();
  auto [q_row, q_col] = detail::second_moment_bases(x, k1, k2);
  EstimationResult res;
  const double sp1 = std::sqrt(double(p1)), sp2 = std::sqrt(double(p2));
  res.row_loading = LoadingMatrix(sp1 * q_row, Identification::raw);
  res.col_loading = LoadingMatrix(sp2 * q_col, Identification::raw);
  res.row_loading_whitened = res.row_loading;
  res.col_loading_whitened = res.col_loading;
  std::vector<Matrix> factors;
  factors.reserve(static_cast<std::size_t>(x.size()));
  const double scale = 1.0 / double(p1 * p2);
  for (const Matrix& xt : x)
    factors.push_back(scale * (res.row_loading.values.transpose() * xt * res.col_loading.values));
  res.factors = MatrixSeries(std::move(factors));
  res.common = common_components(res.row_loading, res.factors, res.col_loading);
  std::vector<Matrix> resid;
  resid.reserve(static_cast<std::size_t>(x.size()));
  for (Index t = 0; t < x.size(); ++t) resid.push_back(x[t] - res.common[t]);
  res.residuals = MatrixSeries(std::move(resid));
  res.method = Method::alpha_pca;
  res.iterations = 1;
  res.converged = true;
  return res;
}

}  // namespace gpca
