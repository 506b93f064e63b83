#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gpca/estimators.hpp"
#include "gpca/linalg.hpp"
#include "gpca/model.hpp"

namespace gpca {

/// Knobs of the adaptive soft-thresholding estimator. Threshold constants
/// left unset are selected by multifold cross-validation over `grid`.
struct ThresholdConfig {
  std::optional<double> c_r;  // row-side threshold constant
  std::optional<double> c_c;  // column-side threshold constant
  int h = 10;                 // number of cross-validation splits
  std::vector<double> grid = default_grid();
  std::optional<double> m_cap;  // fully-diagonal cap; derived from the grid when unset
  double pd_tolerance = 1e-10;
  std::uint64_t cv_seed = 0;

  static std::vector<double> default_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 40; ++i) g.push_back(0.1 * i);
    return g;
  }

  void validate() const {
    if (h < 1) throw ConfigError("ThresholdConfig: cross-validation needs h >= 1");
    if (grid.empty()) throw ConfigError("ThresholdConfig: empty candidate grid");
    for (std::size_t i = 1; i < grid.size(); ++i)
      if (!(grid[i] > grid[i - 1]))
        throw ConfigError("ThresholdConfig: grid must be strictly increasing");
    if (grid.front() < 0.0) throw ConfigError("ThresholdConfig: constants must be >= 0");
    if ((c_r && *c_r < 0.0) || (c_c && *c_c < 0.0))
      throw ConfigError("ThresholdConfig: constants must be >= 0");
  }
};

enum class CovSide { row, col };

struct CovDims {
  Index t, p1, p2;
};

inline double threshold_rate(CovSide side, const CovDims& dims);

/// Soft-thresholded covariance with its diagnostics: the entrywise
/// variance proxy theta, the dimension rate omega, and the achieved
/// off-diagonal sparsity.
struct ThresholdedCovariance {
  Matrix matrix;
  double chosen_constant = 0.0;
  double omega = 0.0;
  Matrix theta;
  double sparsity = 0.0;
};

/// Residuals after projecting out the fitted common component with the
/// plain (identity-covariance) factor formula.
inline MatrixSeries residual_series(const MatrixSeries& x, const LoadingMatrix& r,
                                    const LoadingMatrix& c) {
  const Index p1 = x.rows(), p2 = x.cols();
  if (r.dimension() != p1 || c.dimension() != p2)
    throw DimensionError("residual_series: loading shapes do not match the series");
  for (Index j = 0; j < r.n_factors(); ++j)
    if (r.values.col(j).norm() < 1e-12)
      throw RankError("residual_series: row loading has a null column");
  for (Index j = 0; j < c.n_factors(); ++j)
    if (c.values.col(j).norm() < 1e-12)
      throw RankError("residual_series: column loading has a null column");
  const double scale = 1.0 / double(p1 * p2);
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(x.size()));
  for (const Matrix& xt : x) {
    const Matrix f = scale * (r.values.transpose() * xt * c.values);
    out.push_back(xt - r.values * f * c.values.transpose());
  }
  return MatrixSeries(std::move(out));
}

namespace detail {

inline Index side_dim(CovSide side, const CovDims& d) {
  return side == CovSide::row ? d.p1 : d.p2;
}
inline Index other_dim(CovSide side, const CovDims& d) {
  return side == CovSide::row ? d.p2 : d.p1;
}

// Unnormalized scatter sums over the series: sum_t E_t E_t' for the row
// side (transposed for the column side), and the same with entrywise
// squared matrices, which yields the second moment of entry products.
struct ScatterSums {
  Matrix gram;          // sum_t A_t A_t'
  Matrix squared_gram;  // sum_t (A_t o A_t)(A_t o A_t)'
};

template <typename Pick>
ScatterSums scatter_sums(const MatrixSeries& e, CovSide side, Pick&& use_t) {
  const Index p = side == CovSide::row ? e.rows() : e.cols();
  ScatterSums s;
  s.gram = Matrix::Zero(p, p);
  s.squared_gram = Matrix::Zero(p, p);
  for (Index t = 0; t < e.size(); ++t) {
    if (!use_t(t)) continue;
    const Matrix a = side == CovSide::row ? e[t] : Matrix(e[t].transpose());
    s.gram.selfadjointView<Eigen::Lower>().rankUpdate(a);
    s.squared_gram.selfadjointView<Eigen::Lower>().rankUpdate(Matrix(a.cwiseProduct(a)));
  }
  s.gram = Matrix(s.gram.selfadjointView<Eigen::Lower>());
  s.squared_gram = Matrix(s.squared_gram.selfadjointView<Eigen::Lower>());
  return s;
}

inline ScatterSums scatter_sums(const MatrixSeries& e, CovSide side) {
  return scatter_sums(e, side, [](Index) { return true; });
}

// theta_ij = mean[(product - mean product)^2] = mean(product^2) - u_ij^2.
inline Matrix theta_from_sums(const Matrix& squared_gram, const Matrix& sample,
                              double denom) {
  return (squared_gram / denom - sample.cwiseProduct(sample)).cwiseMax(0.0);
}

struct ThresholdContext {
  Matrix sample;
  Matrix theta;
  double omega = 0.0;
};

inline Matrix apply_soft_threshold(const ThresholdContext& ctx, double c,
                                   double* sparsity = nullptr) {
  const Index p = ctx.sample.rows();
  Matrix out(p, p);
  Index zeroed = 0;
  for (Index j = 0; j < p; ++j) {
    for (Index i = 0; i < p; ++i) {
      if (i == j) {
        out(i, j) = ctx.sample(i, j);
        continue;
      }
      const double z = ctx.sample(i, j);
      const double tau = c * std::sqrt(ctx.theta(i, j)) * ctx.omega;
      const double mag = std::abs(z) - tau;
      out(i, j) = mag > 0.0 ? (z < 0.0 ? -mag : mag) : 0.0;
      if (out(i, j) == 0.0) ++zeroed;
    }
  }
  if (sparsity) *sparsity = p > 1 ? double(zeroed) / double(p * (p - 1)) : 0.0;
  return out;
}

inline ThresholdContext make_context(const Matrix& sample_cov, const MatrixSeries& e,
                                     CovSide side, const CovDims& dims) {
  const Index p = side_dim(side, dims);
  if (sample_cov.rows() != p || sample_cov.cols() != p)
    throw DimensionError("adaptive_threshold: sample covariance has the wrong shape");
  const double denom = double(dims.t) * double(other_dim(side, dims));
  const auto sums = scatter_sums(e, side);
  ThresholdContext ctx;
  ctx.sample = sample_cov;
  ctx.theta = theta_from_sums(sums.squared_gram, sample_cov, denom);
  ctx.omega = threshold_rate(side, dims);
  return ctx;
}

inline double min_eigenvalue(const Matrix& sym) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym, Eigen::EigenvaluesOnly);
  return solver.eigenvalues()(0);
}

inline bool is_diagonal(const Matrix& m) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i)
      if (i != j && m(i, j) != 0.0) return false;
  return true;
}

}  // namespace detail

/// Dimension-driven threshold rate for one side of the covariance pair.
inline double threshold_rate(CovSide side, const CovDims& dims) {
  const double t = double(dims.t);
  const double p = double(detail::side_dim(side, dims));
  const double q = double(detail::other_dim(side, dims));
  return std::sqrt(std::log(p) / (t * q)) + 1.0 / std::sqrt(t * p) +
         1.0 / std::sqrt(p * q);
}

/// Sample row covariance of a residual series: sum_t E_t E_t' / (T p2).
inline Matrix sample_row_cov(const MatrixSeries& e) {
  const auto sums = detail::scatter_sums(e, CovSide::row);
  return sums.gram / (double(e.size()) * double(e.cols()));
}

/// Sample column covariance: sum_t E_t' E_t / (T p1).
inline Matrix sample_col_cov(const MatrixSeries& e) {
  const auto sums = detail::scatter_sums(e, CovSide::col);
  return sums.gram / (double(e.size()) * double(e.rows()));
}

/// Entrywise adaptive soft thresholding of a sample covariance. The
/// diagonal is kept as-is; off-diagonal entries shrink by
/// c * sqrt(theta_ij) * omega and truncate at zero.
inline ThresholdedCovariance adaptive_threshold(const Matrix& sample_cov,
                                                const MatrixSeries& e, CovSide side,
                                                double c, const CovDims& dims) {
  if (c < 0.0) throw ConfigError("adaptive_threshold: constant must be >= 0");
  const auto ctx = detail::make_context(sample_cov, e, side, dims);
  ThresholdedCovariance out;
  out.matrix = detail::apply_soft_threshold(ctx, c, &out.sparsity);
  out.chosen_constant = c;
  out.omega = ctx.omega;
  out.theta = ctx.theta;
  return out;
}

struct MinPdConstant {
  double constant = 0.0;
  bool satisfied = false;  // false when no grid value reached positive definiteness
};

/// Smallest grid constant whose thresholded estimator is positive
/// definite beyond the tolerance. Falls back to the grid maximum (with
/// `satisfied = false`) when none qualifies.
inline MinPdConstant min_pd_constant(const Matrix& sample_cov, const MatrixSeries& e,
                                     CovSide side, const CovDims& dims,
                                     const ThresholdConfig& cfg) {
  cfg.validate();
  for (Index i = 0; i < sample_cov.rows(); ++i)
    if (!(sample_cov(i, i) > 0.0))
      throw DataError("min_pd_constant: sample covariance has a non-positive diagonal");
  const auto ctx = detail::make_context(sample_cov, e, side, dims);
  for (double c : cfg.grid) {
    const Matrix m = detail::apply_soft_threshold(ctx, c);
    if (detail::min_eigenvalue(m) > cfg.pd_tolerance) return {c, true};
  }
  return {cfg.grid.back(), false};
}

struct CrossValidationResult {
  double constant = 0.0;
  double c_min = 0.0;
  double m_cap = 0.0;
  std::vector<double> candidates;
  std::vector<double> objective;  // averaged over splits, aligned with candidates
};

/// Multifold cross-validation for the threshold constant of one side.
/// Each split thresholds the training-subset covariance and scores it
/// against the held-out sample covariance in squared Frobenius norm.
inline CrossValidationResult cross_validate_constant(const MatrixSeries& e, CovSide side,
                                                     const ThresholdConfig& cfg,
                                                     std::uint64_t rng_seed) {
  cfg.validate();
  const Index t_len = e.size();
  if (t_len < 4)
    throw InsufficientDataError("cross_validate_constant: need at least 4 periods");
  const CovDims dims{t_len, e.rows(), e.cols()};
  const double denom_other = double(detail::other_dim(side, dims));

  const auto full_sums = detail::scatter_sums(e, side);
  const Matrix full_sample = full_sums.gram / (double(t_len) * denom_other);
  for (Index i = 0; i < full_sample.rows(); ++i)
    if (!(full_sample(i, i) > 0.0))
      throw DataError("cross_validate_constant: sample covariance has a non-positive diagonal");

  detail::ThresholdContext full_ctx;
  full_ctx.sample = full_sample;
  full_ctx.theta = detail::theta_from_sums(full_sums.squared_gram, full_sample,
                                           double(t_len) * denom_other);
  full_ctx.omega = threshold_rate(side, dims);

  CrossValidationResult res;
  {
    MinPdConstant mp{cfg.grid.back(), false};
    for (double c : cfg.grid) {
      if (detail::min_eigenvalue(detail::apply_soft_threshold(full_ctx, c)) >
          cfg.pd_tolerance) {
        mp = {c, true};
        break;
      }
    }
    res.c_min = mp.constant;
  }
  if (cfg.m_cap) {
    res.m_cap = *cfg.m_cap;
  } else {
    res.m_cap = cfg.grid.back();
    for (double c : cfg.grid)
      if (detail::is_diagonal(detail::apply_soft_threshold(full_ctx, c))) {
        res.m_cap = c;
        break;
      }
  }
  for (double c : cfg.grid)
    if (c >= res.c_min && c <= res.m_cap) res.candidates.push_back(c);
  if (res.candidates.empty()) res.candidates.push_back(res.c_min);
  res.objective.assign(res.candidates.size(), 0.0);

  // Training share T(1 - 1/log T) of the periods, re-randomized per split.
  const Index n1 = std::clamp<Index>(
      static_cast<Index>(std::lround(double(t_len) * (1.0 - 1.0 / std::log(double(t_len))))),
      1, t_len - 1);
  std::vector<Index> order(static_cast<std::size_t>(t_len));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(rng_seed);

  for (int split = 0; split < cfg.h; ++split) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> in_validation(static_cast<std::size_t>(t_len), 0);
    for (Index i = n1; i < t_len; ++i) in_validation[static_cast<std::size_t>(order[i])] = 1;

    const auto val_sums = detail::scatter_sums(
        e, side, [&](Index t) { return in_validation[static_cast<std::size_t>(t)] != 0; });
    const Index n2 = t_len - n1;
    const Matrix val_sample = val_sums.gram / (double(n2) * denom_other);

    detail::ThresholdContext train_ctx;
    const double train_denom = double(n1) * denom_other;
    train_ctx.sample = (full_sums.gram - val_sums.gram) / train_denom;
    train_ctx.theta = detail::theta_from_sums(full_sums.squared_gram - val_sums.squared_gram,
                                              train_ctx.sample, train_denom);
    train_ctx.omega = threshold_rate(side, CovDims{n1, dims.p1, dims.p2});

    for (std::size_t ci = 0; ci < res.candidates.size(); ++ci) {
      const Matrix fit = detail::apply_soft_threshold(train_ctx, res.candidates[ci]);
      res.objective[ci] += (fit - val_sample).squaredNorm();
    }
  }
  for (double& v : res.objective) v /= double(cfg.h);

  std::size_t best = 0;
  for (std::size_t ci = 1; ci < res.candidates.size(); ++ci)
    if (res.objective[ci] < res.objective[best]) best = ci;
  res.constant = res.candidates[best];
  return res;
}

/// Thresholded covariance pair plus the scale bookkeeping that makes the
/// Kronecker product identified.
struct SeparableCovEstimate {
  SeparableCovariance cov;  // rescaled pair, constant assigned to the row side
  ThresholdedCovariance row;
  ThresholdedCovariance col;
  double identifiability_constant = 1.0;  // T p1 p2 / residual energy
  LoadingMatrix pe_row_loading;
  LoadingMatrix pe_col_loading;
  bool degenerate_zero_residual = false;
};

inline SeparableCovEstimate estimate_separable_cov(const MatrixSeries& x,
                                                   const EstimationResult& pe_fit,
                                                   const ThresholdConfig& cfg) {
  cfg.validate();
  const Index t_len = x.size(), p1 = x.rows(), p2 = x.cols();
  const CovDims dims{t_len, p1, p2};
  SeparableCovEstimate est;
  est.pe_row_loading = pe_fit.row_loading;
  est.pe_col_loading = pe_fit.col_loading;

  const MatrixSeries resid = residual_series(x, pe_fit.row_loading, pe_fit.col_loading);
  double energy = 0.0, x_energy = 0.0;
  for (Index t = 0; t < t_len; ++t) {
    energy += resid[t].squaredNorm();
    x_energy += x[t].squaredNorm();
  }

  if (energy <= 1e-20 * std::max(x_energy, 1.0)) {
    // Zero residuals: no noise scale to estimate, whitening reduces to the
    // identity and the downstream fit coincides with the plain estimator.
    est.degenerate_zero_residual = true;
    est.cov = SeparableCovariance::identity(p1, p2);
    est.cov.scale_convention = "degenerate zero-residual fit; identity covariance";
    est.row = ThresholdedCovariance{Matrix::Identity(p1, p1), 0.0,
                                    threshold_rate(CovSide::row, dims),
                                    Matrix::Zero(p1, p1), 1.0};
    est.col = ThresholdedCovariance{Matrix::Identity(p2, p2), 0.0,
                                    threshold_rate(CovSide::col, dims),
                                    Matrix::Zero(p2, p2), 1.0};
    est.identifiability_constant = 1.0;
    return est;
  }

  const Matrix row_sample = sample_row_cov(resid);
  const Matrix col_sample = sample_col_cov(resid);
  const double c_r =
      cfg.c_r ? *cfg.c_r
              : cross_validate_constant(resid, CovSide::row, cfg, cfg.cv_seed).constant;
  const double c_c =
      cfg.c_c ? *cfg.c_c
              : cross_validate_constant(resid, CovSide::col, cfg, cfg.cv_seed ^ 0x9e3779b97f4a7c15ULL)
                    .constant;
  est.row = adaptive_threshold(row_sample, resid, CovSide::row, c_r, dims);
  est.col = adaptive_threshold(col_sample, resid, CovSide::col, c_c, dims);

  est.identifiability_constant = double(t_len) * double(p1) * double(p2) / energy;
  est.cov = SeparableCovariance(
      Matrix(est.identifiability_constant * est.row.matrix), est.col.matrix,
      "identifiability constant (T p1 p2 / residual energy) assigned to the row covariance");
  return est;
}

inline SeparableCovEstimate estimate_separable_cov(const MatrixSeries& x, Index k1, Index k2,
                                                   const ThresholdConfig& cfg,
                                                   const GpcaOptions& fit_opts = {}) {
  return estimate_separable_cov(x, pe_estimate(x, k1, k2, fit_opts), cfg);
}

/// Fully data-driven fit: thresholded covariance estimates plugged into
/// the whitened eigen-iteration.
inline EstimationResult data_driven_gpca(const MatrixSeries& x, Index k1, Index k2,
                                         const ThresholdConfig& cfg,
                                         const GpcaOptions& opts = {}) {
  const auto est = estimate_separable_cov(x, k1, k2, cfg, opts);
  return detail::gpca_with_covariance(x, est.cov, k1, k2, opts, Method::gpca);
}

inline EstimationResult data_driven_gpca(const MatrixSeries& x,
                                         const SeparableCovEstimate& est, Index k1, Index k2,
                                         const GpcaOptions& opts = {}) {
  return detail::gpca_with_covariance(x, est.cov, k1, k2, opts, Method::gpca);
}

}  // namespace gpca
