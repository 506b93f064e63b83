#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "gpca/covariance.hpp"
#include "gpca/estimators.hpp"
#include "gpca/io.hpp"
#include "gpca/linalg.hpp"
#include "gpca/model.hpp"

namespace gpca {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent deterministic seed stream derived from a master seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

enum class CovCase { weak, banded, block, custom };

inline const char* cov_case_name(CovCase c) {
  switch (c) {
    case CovCase::weak: return "1";
    case CovCase::banded: return "2";
    case CovCase::block: return "3";
    case CovCase::custom: return "custom";
  }
  return "?";
}

/// Synthetic covariance of one side. Case "weak": unit diagonal with
/// 1/p off the diagonal. Case "banded": unit diagonal, (1/2 - |i-j|/10)+
/// off it. Case "block": five diagonal blocks of size p/5 with 10/p off
/// the diagonal inside each block and diagonal entries drawn from
/// {1.0, 1.1, 1.2, 1.3, 1.4}.
inline Matrix gen_cov(CovCase cov_case, Index p, std::uint64_t seed) {
  Matrix m = Matrix::Identity(p, p);
  switch (cov_case) {
    case CovCase::weak: {
      const double off = 1.0 / double(p);
      for (Index i = 0; i < p; ++i)
        for (Index j = 0; j < p; ++j)
          if (i != j) m(i, j) = off;
      break;
    }
    case CovCase::banded: {
      for (Index i = 0; i < p; ++i)
        for (Index j = 0; j < p; ++j)
          if (i != j) m(i, j) = std::max(0.5 - std::abs(double(i - j)) / 10.0, 0.0);
      break;
    }
    case CovCase::block: {
      if (p % 5 != 0)
        throw ConfigError("gen_cov: block-diagonal case needs a dimension divisible by 5");
      const Index b = p / 5;
      const double off = 10.0 / double(p);
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<int> level(0, 4);
      for (Index g = 0; g < 5; ++g)
        for (Index i = g * b; i < (g + 1) * b; ++i)
          for (Index j = g * b; j < (g + 1) * b; ++j)
            if (i != j) m(i, j) = off;
      for (Index i = 0; i < p; ++i) m(i, i) = 1.0 + 0.1 * level(rng);
      break;
    }
    case CovCase::custom:
      throw ConfigError("gen_cov: custom covariances are supplied, not generated");
  }
  return m;
}

struct DgpConfig {
  Index t = 100, p1 = 20, p2 = 100;
  Index k1 = 3, k2 = 3;
  double phi = 0.1;  // factor AR(1) coefficient
  double psi = 0.1;  // noise AR(1) coefficient
  CovCase cov_case = CovCase::weak;
  std::optional<Matrix> custom_row_cov, custom_col_cov;
  std::uint64_t seed = 0;
  int burn_in = 100;
  bool normality_mode = false;  // iid factors with fixed diagonal covariance
  double noise_scale = 1.0;

  void validate() const {
    if (t < 1 || p1 < 1 || p2 < 1) throw ConfigError("DgpConfig: dimensions must be >= 1");
    if (k1 < 1 || k2 < 1 || k1 > p1 || k2 > p2)
      throw ConfigError("DgpConfig: factor counts must lie in [1, dimension]");
    if (!(std::abs(phi) < 1.0) || !(std::abs(psi) < 1.0))
      throw ConfigError("DgpConfig: AR coefficients must satisfy |phi|, |psi| < 1");
    if (burn_in < 0) throw ConfigError("DgpConfig: burn_in must be >= 0");
    if (noise_scale < 0.0) throw ConfigError("DgpConfig: noise_scale must be >= 0");
    if (cov_case == CovCase::custom && (!custom_row_cov || !custom_col_cov))
      throw ConfigError("DgpConfig: custom case needs both covariance matrices");
    if (cov_case == CovCase::block && (p1 % 5 != 0 || p2 % 5 != 0))
      throw ConfigError("DgpConfig: block case needs p1 and p2 divisible by 5");
  }
};

struct GroundTruth {
  Matrix row_loading;  // p1 x k1
  Matrix col_loading;  // p2 x k2
  SeparableCovariance cov;
  MatrixSeries factors;
  MatrixSeries noise;  // includes the noise scale, so X = R F C' + noise exactly
  bool normality_mode = false;
  Vector factor_vec_variances;  // diagonal of the iid factor law (normality mode)
};

namespace detail {

inline Matrix draw_matrix(Index r, Index c, std::mt19937_64& rng,
                          std::normal_distribution<double>& normal) {
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)  // column-major to mirror vec() ordering
    for (Index i = 0; i < r; ++i) m(i, j) = normal(rng);
  return m;
}

}  // namespace detail

/// Draws series from a fixed structure (covariances and loadings) so
/// repeated experiments can share the structure across path seeds.
class DgpSampler {
 public:
  explicit DgpSampler(const DgpConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    if (cfg.cov_case == CovCase::custom) {
      u_ = *cfg.custom_row_cov;
      v_ = *cfg.custom_col_cov;
      if (u_.rows() != cfg.p1 || u_.cols() != cfg.p1 || v_.rows() != cfg.p2 ||
          v_.cols() != cfg.p2)
        throw ConfigError("DgpSampler: custom covariance dimensions do not match");
    } else {
      u_ = gen_cov(cfg.cov_case, cfg.p1, derive_seed(cfg.seed, 1));
      v_ = gen_cov(cfg.cov_case, cfg.p2, derive_seed(cfg.seed, 2));
    }
    u_half_ = spd_sqrt(u_);
    v_half_ = spd_sqrt(v_);

    std::mt19937_64 rng(derive_seed(cfg.seed, 3));
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    r_.resize(cfg.p1, cfg.k1);
    for (Index j = 0; j < cfg.k1; ++j)
      for (Index i = 0; i < cfg.p1; ++i) r_(i, j) = uni(rng);
    c_.resize(cfg.p2, cfg.k2);
    for (Index j = 0; j < cfg.k2; ++j)
      for (Index i = 0; i < cfg.p2; ++i) c_(i, j) = uni(rng);

    if (cfg.normality_mode) {
      // Loadings rescaled so the whitened versions are exactly
      // sqrt(p) times an orthonormal basis of their own span.
      const Matrix u_inv_half = spd_inv_sqrt(u_);
      const Matrix v_inv_half = spd_inv_sqrt(v_);
      r_ = u_half_ * whitened_basis(Matrix(u_inv_half * r_)) * std::sqrt(double(cfg.p1));
      c_ = v_half_ * whitened_basis(Matrix(v_inv_half * c_)) * std::sqrt(double(cfg.p2));
      d_.resize(cfg.k1 * cfg.k2);
      const double cycle[3] = {1.5, 1.0, 0.5};
      for (Index i = 0; i < d_.size(); ++i) d_(i) = cycle[i % 3];
    }
  }

  const Matrix& row_cov() const { return u_; }
  const Matrix& col_cov() const { return v_; }
  const Matrix& row_loading() const { return r_; }
  const Matrix& col_loading() const { return c_; }
  const Vector& factor_vec_variances() const { return d_; }
  const DgpConfig& config() const { return cfg_; }

  std::pair<MatrixSeries, GroundTruth> draw(std::uint64_t path_seed) const {
    std::mt19937_64 rng(path_seed);
    std::normal_distribution<double> normal;
    const Index t_len = cfg_.t;

    std::vector<Matrix> factors;
    factors.reserve(static_cast<std::size_t>(t_len));
    if (cfg_.normality_mode) {
      for (Index t = 0; t < t_len; ++t) {
        Matrix f(cfg_.k1, cfg_.k2);
        for (Index j = 0; j < cfg_.k2; ++j)
          for (Index i = 0; i < cfg_.k1; ++i)
            f(i, j) = std::sqrt(d_(j * cfg_.k1 + i)) * normal(rng);
        factors.push_back(std::move(f));
      }
    } else {
      const double innov = std::sqrt(1.0 - cfg_.phi * cfg_.phi);
      Matrix state = detail::draw_matrix(cfg_.k1, cfg_.k2, rng, normal);
      for (int b = 0; b < cfg_.burn_in; ++b)
        state = cfg_.phi * state + innov * detail::draw_matrix(cfg_.k1, cfg_.k2, rng, normal);
      for (Index t = 0; t < t_len; ++t) {
        state = cfg_.phi * state + innov * detail::draw_matrix(cfg_.k1, cfg_.k2, rng, normal);
        factors.push_back(state);
      }
    }

    std::vector<Matrix> noise;
    noise.reserve(static_cast<std::size_t>(t_len));
    auto matrix_normal = [&]() {
      return Matrix(u_half_ * detail::draw_matrix(cfg_.p1, cfg_.p2, rng, normal) * v_half_);
    };
    if (cfg_.normality_mode) {
      for (Index t = 0; t < t_len; ++t) noise.push_back(cfg_.noise_scale * matrix_normal());
    } else {
      const double innov = std::sqrt(1.0 - cfg_.psi * cfg_.psi);
      Matrix state = matrix_normal();
      for (int b = 0; b < cfg_.burn_in; ++b) state = cfg_.psi * state + innov * matrix_normal();
      for (Index t = 0; t < t_len; ++t) {
        state = cfg_.psi * state + innov * matrix_normal();
        noise.push_back(cfg_.noise_scale * state);
      }
    }

    std::vector<Matrix> xs;
    xs.reserve(static_cast<std::size_t>(t_len));
    for (Index t = 0; t < t_len; ++t) {
      // Materialize the common component so X - R F C' - E is exactly zero.
      const Matrix s = r_ * factors[static_cast<std::size_t>(t)] * c_.transpose();
      xs.push_back(s + noise[static_cast<std::size_t>(t)]);
    }

    GroundTruth truth;
    truth.row_loading = r_;
    truth.col_loading = c_;
    truth.cov = SeparableCovariance(u_, v_, "simulation truth");
    truth.factors = MatrixSeries(std::move(factors));
    truth.noise = MatrixSeries(std::move(noise));
    truth.normality_mode = cfg_.normality_mode;
    truth.factor_vec_variances = d_;
    return {MatrixSeries(std::move(xs)), truth};
  }

 private:
  static Matrix whitened_basis(const Matrix& m) {
    Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU);
    Matrix q = svd.matrixU();
    detail::fix_eigenvector_signs(q);
    return q;
  }

  DgpConfig cfg_;
  Matrix u_, v_, u_half_, v_half_, r_, c_;
  Vector d_;
};

/// One-shot generation: structure and paths both derived from cfg.seed.
inline std::pair<MatrixSeries, GroundTruth> gen_series(const DgpConfig& cfg) {
  const DgpSampler sampler(cfg);
  return sampler.draw(derive_seed(cfg.seed, 4));
}

/// Mean squared error between two series of equal shape:
/// sum_t |A_t - B_t|_F^2 / (T p1 p2).
inline double mse_common(const MatrixSeries& estimate, const MatrixSeries& truth) {
  if (estimate.size() != truth.size() || estimate.rows() != truth.rows() ||
      estimate.cols() != truth.cols())
    throw DimensionError("mse_common: series shapes differ");
  double acc = 0.0;
  for (Index t = 0; t < estimate.size(); ++t) acc += (estimate[t] - truth[t]).squaredNorm();
  return acc / (double(estimate.size()) * double(estimate.rows()) * double(estimate.cols()));
}

/// Least-squares alignment H with estimate ~ truth * H.
inline Matrix align_rotation(const Matrix& estimate, const Matrix& truth) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols())
    throw DimensionError("align_rotation: shapes differ");
  Eigen::ColPivHouseholderQR<Matrix> qr(truth);
  if (qr.rank() < truth.cols()) throw RankError("align_rotation: truth is rank deficient");
  return qr.solve(estimate);
}

struct RotationAlignment {
  Matrix row;  // k1 x k1
  Matrix col;  // k2 x k2
};

inline RotationAlignment align_rotations(const EstimationResult& fit,
                                         const GroundTruth& truth) {
  return {align_rotation(fit.row_loading.values, truth.row_loading),
          align_rotation(fit.col_loading.values, truth.col_loading)};
}

/// Asymptotic covariance of one row of the estimated row loading under
/// the iid-factor design: sandwich of the Monte Carlo average of
/// (u_ii / p2) F (C' V^{-1} C) F' between the factor second-moment
/// eigenstructure.
inline Matrix asymptotic_row_variance(const GroundTruth& truth, Index row_index, int n_mc,
                                      std::uint64_t seed) {
  if (!truth.normality_mode)
    throw ConfigError("asymptotic_row_variance: needs an iid-factor (normality-mode) truth");
  if (n_mc < 1) throw ConfigError("asymptotic_row_variance: n_mc must be >= 1");
  const Index k1 = truth.factors.rows(), k2 = truth.factors.cols();
  const Index p2 = truth.col_loading.rows();
  if (row_index < 0 || row_index >= truth.row_loading.rows())
    throw DimensionError("asymptotic_row_variance: row index out of range");

  const Matrix v_inv = spd_powers(truth.cov.col_cov).inverse;
  const Matrix w = truth.col_loading.transpose() * v_inv * truth.col_loading;  // k2 x k2
  const double u_ii = truth.cov.row_cov(row_index, row_index);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Matrix acc = Matrix::Zero(k1, k1);
  Matrix f(k1, k2);
  for (int m = 0; m < n_mc; ++m) {
    for (Index j = 0; j < k2; ++j)
      for (Index i = 0; i < k1; ++i)
        f(i, j) = std::sqrt(truth.factor_vec_variances(j * k1 + i)) * normal(rng);
    acc += f * w * f.transpose();
  }
  const Matrix a = (u_ii / (double(p2) * double(n_mc))) * acc;

  // Factor second moment in closed form: diagonal with row sums of the
  // vec-variances.
  Matrix sigma1 = Matrix::Zero(k1, k1);
  for (Index i = 0; i < k1; ++i)
    for (Index l = 0; l < k2; ++l) sigma1(i, i) += truth.factor_vec_variances(l * k1 + i);
  const auto dec = detail::sym_eig_full(sigma1, "asymptotic_row_variance");
  const Matrix gamma = dec.eigenvectors;
  const Vector lambda_inv = dec.eigenvalues.cwiseInverse();
  return lambda_inv.asDiagonal() * gamma.transpose() * a * gamma * lambda_inv.asDiagonal();
}

/// One-sample Kolmogorov-Smirnov distance to the standard normal.
inline double ks_distance_normal(std::vector<double> sample) {
  if (sample.empty()) throw InsufficientDataError("ks_distance_normal: empty sample");
  std::sort(sample.begin(), sample.end());
  const double n = double(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-sample[i] / std::sqrt(2.0));
    d = std::max(d, std::max(cdf - double(i) / n, double(i + 1) / n - cdf));
  }
  return d;
}

namespace detail {

inline void parallel_for(Index n, int threads, const std::function<void(Index)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::vector<std::thread> pool;
  const int used = int(std::min<Index>(threads, n));
  pool.reserve(static_cast<std::size_t>(used));
  for (int w = 0; w < used; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const Index i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  for (std::thread& th : pool) th.join();
}

}  // namespace detail

enum class Setting { A, B, custom };

inline const char* setting_name(Setting s) {
  switch (s) {
    case Setting::A: return "A";
    case Setting::B: return "B";
    case Setting::custom: return "custom";
  }
  return "?";
}

/// Applies the named dimension pattern: setting A keeps p1 fixed and sets
/// p2 = T, setting B keeps p2 fixed and sets p1 = T.
inline DgpConfig apply_setting(DgpConfig cfg, Setting s) {
  if (s == Setting::A) cfg.p2 = cfg.t;
  if (s == Setting::B) cfg.p1 = cfg.t;
  return cfg;
}

struct ReportRow {
  std::string cov_case;
  std::string setting;
  Index t = 0, p1 = 0, p2 = 0;
  std::string method;
  std::string metric;
  double mean = 0.0, sd = 0.0;
  int n_effective = 0;
};

struct ReportTable {
  std::vector<ReportRow> rows;

  std::string to_csv() const {
    std::string out = "case,setting,T,p1,p2,method,metric,mean,sd,n_effective\n";
    for (const ReportRow& r : rows) {
      out += r.cov_case + "," + r.setting + "," + std::to_string(r.t) + "," +
             std::to_string(r.p1) + "," + std::to_string(r.p2) + "," + r.method + "," +
             r.metric + "," + format_full(r.mean) + "," + format_full(r.sd) + "," +
             std::to_string(r.n_effective) + "\n";
    }
    return out;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "case " << (rows.empty() ? "?" : rows.front().cov_case) << ", setting "
       << (rows.empty() ? "?" : rows.front().setting) << "\n";
    std::vector<std::string> metrics;
    for (const ReportRow& r : rows)
      if (std::find(metrics.begin(), metrics.end(), r.metric) == metrics.end())
        metrics.push_back(r.metric);
    for (const std::string& metric : metrics) {
      os << metric << ":\n";
      for (const ReportRow& r : rows) {
        if (r.metric != metric) continue;
        char buf[96];
        std::snprintf(buf, sizeof(buf), "  %-9s T=%-4lld %0.4f(%0.4f) n=%d\n",
                      r.method.c_str(), static_cast<long long>(r.t), r.mean, r.sd,
                      r.n_effective);
        os << buf;
      }
    }
    return os.str();
  }

  const ReportRow& cell(const std::string& method, const std::string& metric) const {
    for (const ReportRow& r : rows)
      if (r.method == method && r.metric == metric) return r;
    throw DataError("ReportTable: no cell for " + method + "/" + metric);
  }
};

struct MonteCarloOptions {
  std::vector<Method> methods{Method::gpca, Method::oracle_gpca, Method::pe,
                              Method::alpha_pca};
  int n_reps = 200;
  Setting setting = Setting::custom;
  ThresholdConfig threshold;
  GpcaOptions fit;
  int threads = 1;
};

/// Monte Carlo estimation-error study: per replication a fresh draw of
/// the whole generating process, each requested method fitted on the same
/// data, loading-space distances and common-component errors aggregated
/// as mean and standard deviation per cell.
inline ReportTable run_monte_carlo(const DgpConfig& base_cfg, const MonteCarloOptions& opts) {
  if (opts.n_reps < 1) throw ConfigError("run_monte_carlo: n_reps must be >= 1");
  const DgpConfig cfg = apply_setting(base_cfg, opts.setting);
  cfg.validate();

  struct RepMetrics {
    bool ok = false;
    double dist_row = 0.0, dist_col = 0.0, mse = 0.0;
  };
  const std::size_t n_methods = opts.methods.size();
  std::vector<std::vector<RepMetrics>> results(
      static_cast<std::size_t>(opts.n_reps), std::vector<RepMetrics>(n_methods));

  const bool needs_pe =
      std::find(opts.methods.begin(), opts.methods.end(), Method::pe) != opts.methods.end() ||
      std::find(opts.methods.begin(), opts.methods.end(), Method::gpca) != opts.methods.end();

  detail::parallel_for(opts.n_reps, opts.threads, [&](Index rep) {
    const std::uint64_t rep_seed = derive_seed(cfg.seed, 100 + std::uint64_t(rep));
    DgpConfig rep_cfg = cfg;
    rep_cfg.seed = rep_seed;
    const auto [x, truth] = gen_series(rep_cfg);
    std::vector<Matrix> strue;
    strue.reserve(static_cast<std::size_t>(x.size()));
    for (Index t = 0; t < x.size(); ++t) strue.push_back(x[t] - truth.noise[t]);
    const MatrixSeries common_truth(std::move(strue));

    std::optional<EstimationResult> pe_fit;
    if (needs_pe) {
      try {
        pe_fit = pe_estimate(x, cfg.k1, cfg.k2, opts.fit);
      } catch (const Error&) {
      }
    }

    for (std::size_t mi = 0; mi < n_methods; ++mi) {
      RepMetrics& cell = results[static_cast<std::size_t>(rep)][mi];
      try {
        EstimationResult fit;
        switch (opts.methods[mi]) {
          case Method::alpha_pca:
            fit = alpha_pca_estimate(x, cfg.k1, cfg.k2);
            break;
          case Method::pe:
            if (!pe_fit) throw DataError("pe fit failed");
            fit = *pe_fit;
            break;
          case Method::oracle_gpca:
            fit = oracle_gpca(x, truth.cov, cfg.k1, cfg.k2, opts.fit);
            break;
          case Method::gpca: {
            if (!pe_fit) throw DataError("pe fit failed");
            ThresholdConfig tcfg = opts.threshold;
            tcfg.cv_seed = derive_seed(rep_seed, 17);
            const auto est = estimate_separable_cov(x, *pe_fit, tcfg);
            fit = data_driven_gpca(x, est, cfg.k1, cfg.k2, opts.fit);
            break;
          }
        }
        cell.dist_row = subspace_distance(fit.row_loading.values, truth.row_loading);
        cell.dist_col = subspace_distance(fit.col_loading.values, truth.col_loading);
        cell.mse = mse_common(fit.common, common_truth);
        cell.ok = true;
      } catch (const Error&) {
        cell.ok = false;
      }
    }
  });

  ReportTable table;
  const char* metric_names[3] = {"dist_row", "dist_col", "mse"};
  for (std::size_t mi = 0; mi < n_methods; ++mi) {
    for (int metric = 0; metric < 3; ++metric) {
      std::vector<double> vals;
      vals.reserve(static_cast<std::size_t>(opts.n_reps));
      for (int rep = 0; rep < opts.n_reps; ++rep) {
        const RepMetrics& cell = results[static_cast<std::size_t>(rep)][mi];
        if (!cell.ok) continue;
        vals.push_back(metric == 0 ? cell.dist_row : metric == 1 ? cell.dist_col : cell.mse);
      }
      ReportRow row;
      row.cov_case = cov_case_name(cfg.cov_case);
      row.setting = setting_name(opts.setting);
      row.t = cfg.t;
      row.p1 = cfg.p1;
      row.p2 = cfg.p2;
      row.method = method_name(opts.methods[mi]);
      row.metric = metric_names[metric];
      row.n_effective = int(vals.size());
      if (!vals.empty()) {
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= double(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        row.mean = mean;
        row.sd = vals.size() > 1 ? std::sqrt(var / double(vals.size() - 1)) : 0.0;
      }
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

struct NormalitySample {
  std::vector<double> standardized;  // one value per successful replication
  double ks_distance = 0.0;
  double asymptotic_sd = 0.0;
  int n_failed = 0;
};

/// Standardized estimation errors of the top-left row-loading entry under
/// the iid-factor design, one value per replication, plus their
/// Kolmogorov-Smirnov distance to the standard normal. The generating
/// structure (loadings and covariances) is held fixed across
/// replications; only factor and noise paths are redrawn.
inline std::map<Method, NormalitySample> normality_experiment(
    const DgpConfig& cfg, const std::vector<Method>& methods, int n_reps,
    const ThresholdConfig& threshold = {}, int n_mc_variance = 20000, int threads = 1,
    const GpcaOptions& fit_opts = {}) {
  if (!cfg.normality_mode)
    throw ConfigError("normality_experiment: config must enable normality_mode");
  if (n_reps < 1) throw ConfigError("normality_experiment: n_reps must be >= 1");
  const DgpSampler sampler(cfg);
  const GroundTruth truth0 = sampler.draw(derive_seed(cfg.seed, 5)).second;
  const Matrix avar =
      asymptotic_row_variance(truth0, 0, n_mc_variance, derive_seed(cfg.seed, 6));
  const double sd0 = std::sqrt(avar(0, 0));
  const double rate = std::sqrt(double(cfg.t) * double(cfg.p2));

  const bool needs_pe =
      std::find(methods.begin(), methods.end(), Method::pe) != methods.end() ||
      std::find(methods.begin(), methods.end(), Method::gpca) != methods.end();

  std::vector<std::vector<std::optional<double>>> z(
      methods.size(), std::vector<std::optional<double>>(static_cast<std::size_t>(n_reps)));

  detail::parallel_for(n_reps, threads, [&](Index rep) {
    const std::uint64_t rep_seed = derive_seed(cfg.seed, 1000 + std::uint64_t(rep));
    const auto [x, truth] = sampler.draw(rep_seed);

    std::optional<EstimationResult> pe_fit;
    if (needs_pe) {
      try {
        pe_fit = pe_estimate(x, cfg.k1, cfg.k2, fit_opts);
      } catch (const Error&) {
      }
    }
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      try {
        EstimationResult fit;
        switch (methods[mi]) {
          case Method::alpha_pca:
            fit = alpha_pca_estimate(x, cfg.k1, cfg.k2);
            break;
          case Method::pe:
            if (!pe_fit) throw DataError("pe fit failed");
            fit = *pe_fit;
            break;
          case Method::oracle_gpca:
            fit = oracle_gpca(x, truth.cov, cfg.k1, cfg.k2, fit_opts);
            break;
          case Method::gpca: {
            if (!pe_fit) throw DataError("pe fit failed");
            ThresholdConfig tcfg = threshold;
            tcfg.cv_seed = derive_seed(rep_seed, 17);
            const auto est = estimate_separable_cov(x, *pe_fit, tcfg);
            fit = data_driven_gpca(x, est, cfg.k1, cfg.k2, fit_opts);
            break;
          }
        }
        const Matrix h = align_rotation(fit.row_loading.values, truth.row_loading);
        const Vector deviation = fit.row_loading.values.row(0).transpose() -
                                 h.transpose() * truth.row_loading.row(0).transpose();
        z[mi][static_cast<std::size_t>(rep)] = rate * deviation(0) / sd0;
      } catch (const Error&) {
      }
    }
  });

  std::map<Method, NormalitySample> out;
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    NormalitySample s;
    s.asymptotic_sd = sd0;
    for (const auto& v : z[mi]) {
      if (v)
        s.standardized.push_back(*v);
      else
        ++s.n_failed;
    }
    if (!s.standardized.empty()) s.ks_distance = ks_distance_normal(s.standardized);
    out[methods[mi]] = std::move(s);
  }
  return out;
}

}  // namespace gpca
