#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "gpca/estimators.hpp"
#include "gpca/linalg.hpp"

using gpca::Index;
using gpca::LoadingMatrix;
using gpca::Matrix;
using gpca::MatrixSeries;
using gpca::SeparableCovariance;
using gpca::Vector;

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = normal(rng);
  return m;
}

Matrix random_spd(Index p, std::mt19937_64& rng, double shift = 0.5) {
  const Matrix a = random_matrix(p, p, rng);
  return Matrix(a * a.transpose()) / double(p) + shift * Matrix::Identity(p, p);
}

struct TestData {
  MatrixSeries x;
  Matrix r, c;          // true loadings
  MatrixSeries factors;
};

// Low-rank series with optional separable noise; all draws local to the
// test so estimator checks do not depend on the simulation module.
TestData make_data(std::uint64_t seed, Index t_len, Index p1, Index p2, Index k1, Index k2,
                   double noise_sd, const Matrix* u = nullptr, const Matrix* v = nullptr) {
  std::mt19937_64 rng(seed);
  TestData d;
  d.r = random_matrix(p1, k1, rng);
  d.c = random_matrix(p2, k2, rng);
  Matrix u_half, v_half;
  if (u) u_half = gpca::spd_sqrt(*u);
  if (v) v_half = gpca::spd_sqrt(*v);
  std::vector<Matrix> xs, fs;
  for (Index t = 0; t < t_len; ++t) {
    const Matrix f = random_matrix(k1, k2, rng);
    Matrix x = d.r * f * d.c.transpose();
    if (noise_sd > 0.0) {
      Matrix e = random_matrix(p1, p2, rng);
      if (u) e = u_half * e;
      if (v) e = e * v_half;
      x += noise_sd * e;
    }
    fs.push_back(f);
    xs.push_back(std::move(x));
  }
  d.factors = MatrixSeries(std::move(fs));
  d.x = MatrixSeries(std::move(xs));
  return d;
}

bool loading_bytes_equal(const LoadingMatrix& a, const LoadingMatrix& b) {
  return a.values.rows() == b.values.rows() && a.values.cols() == b.values.cols() &&
         std::memcmp(a.values.data(), b.values.data(),
                     sizeof(double) * a.values.size()) == 0;
}

}  // namespace

TEST_CASE("alpha_pca_init recovers the span of noiseless data") {
  const auto d = make_data(1, 12, 9, 7, 2, 2, 0.0);
  const auto [r0, c0] = gpca::alpha_pca_init(d.x, 2, 2);
  CHECK(gpca::subspace_distance(r0.values, d.r) <= 1e-8);
  CHECK(gpca::subspace_distance(c0.values, d.c) <= 1e-8);
  CHECK(r0.identification == gpca::Identification::whitened);
}

TEST_CASE("alpha_pca_init rank-one single observation") {
  Matrix x = Matrix::Zero(3, 3);
  x(0, 0) = 1.0;
  const MatrixSeries series({x});
  const auto [r0, c0] = gpca::alpha_pca_init(series, 1, 1);
  Vector expect = Vector::Zero(3);
  expect(0) = std::sqrt(3.0);
  CHECK((r0.values.col(0) - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((c0.values.col(0) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("alpha_pca_init rejects oversized factor counts") {
  const auto d = make_data(2, 4, 5, 4, 1, 1, 0.1);
  CHECK_THROWS_AS(gpca::alpha_pca_init(d.x, 6, 1), gpca::DimensionError);
}

TEST_CASE("closed_form_factor identification algebra") {
  std::mt19937_64 rng(33);
  const Index p1 = 8, p2 = 6, k1 = 2, k2 = 3;
  const Matrix u = random_spd(p1, rng), v = random_spd(p2, rng);
  const Matrix qr = gpca::orthonormalize(random_matrix(p1, k1, rng));
  const Matrix qc = gpca::orthonormalize(random_matrix(p2, k2, rng));
  const Matrix r = std::sqrt(double(p1)) * gpca::spd_sqrt(u) * qr;
  const Matrix c = std::sqrt(double(p2)) * gpca::spd_sqrt(v) * qc;
  const Matrix f = random_matrix(k1, k2, rng);
  const Matrix x = r * f * c.transpose();
  const SeparableCovariance cov(u, v);
  const Matrix fhat =
      gpca::closed_form_factor(x, LoadingMatrix(r, gpca::Identification::raw),
                               LoadingMatrix(c, gpca::Identification::raw), cov);
  CHECK((fhat - f).cwiseAbs().maxCoeff() < 1e-10);

  const Matrix zero = Matrix::Zero(p1, p2);
  CHECK(gpca::closed_form_factor(zero, LoadingMatrix(r, gpca::Identification::raw),
                                 LoadingMatrix(c, gpca::Identification::raw), cov)
            .cwiseAbs()
            .maxCoeff() == 0.0);
}

TEST_CASE("closed_form_factor matches an independent dense evaluation") {
  std::mt19937_64 rng(34);
  const Index p1 = 6, p2 = 5, k1 = 2, k2 = 2;
  const Matrix u = random_spd(p1, rng), v = random_spd(p2, rng);
  const Matrix r = random_matrix(p1, k1, rng), c = random_matrix(p2, k2, rng);
  const Matrix x = random_matrix(p1, p2, rng);
  const Matrix fhat =
      gpca::closed_form_factor(x, LoadingMatrix(r, gpca::Identification::raw),
                               LoadingMatrix(c, gpca::Identification::raw),
                               SeparableCovariance(u, v));
  // Straightforward evaluation via explicit inverses and nested loops.
  const Matrix ui = u.inverse(), vi = v.inverse();
  Matrix expect = Matrix::Zero(k1, k2);
  const Matrix left = r.transpose() * ui;   // k1 x p1
  const Matrix right = vi * c;              // p2 x k2
  for (Index a = 0; a < k1; ++a)
    for (Index b = 0; b < k2; ++b) {
      double acc = 0.0;
      for (Index i = 0; i < p1; ++i)
        for (Index j = 0; j < p2; ++j) acc += left(a, i) * x(i, j) * right(j, b);
      expect(a, b) = acc / double(p1 * p2);
    }
  CHECK((fhat - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("common_components basics and naive-loop oracle") {
  Matrix r1 = Matrix::Zero(3, 1), c1 = Matrix::Zero(3, 1);
  r1(0, 0) = 1.0;
  c1(0, 0) = 1.0;
  Matrix f = Matrix::Constant(1, 1, 2.0);
  const auto s = gpca::common_components(LoadingMatrix(r1, gpca::Identification::raw),
                                         MatrixSeries({f}),
                                         LoadingMatrix(c1, gpca::Identification::raw));
  CHECK(s[0](0, 0) == doctest::Approx(2.0));
  CHECK(s[0].cwiseAbs().sum() == doctest::Approx(2.0));

  const auto z = gpca::common_components(
      LoadingMatrix(r1, gpca::Identification::raw), MatrixSeries({Matrix::Zero(1, 1)}),
      LoadingMatrix(c1, gpca::Identification::raw));
  CHECK(z[0].cwiseAbs().maxCoeff() == 0.0);

  std::mt19937_64 rng(35);
  const Matrix r = random_matrix(5, 2, rng), c = random_matrix(4, 3, rng),
               fm = random_matrix(2, 3, rng);
  const auto sr = gpca::common_components(LoadingMatrix(r, gpca::Identification::raw),
                                          MatrixSeries({fm}),
                                          LoadingMatrix(c, gpca::Identification::raw));
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (Index a = 0; a < 2; ++a)
        for (Index b = 0; b < 3; ++b) acc += r(i, a) * fm(a, b) * c(j, b);
      CHECK(sr[0](i, j) == doctest::Approx(acc).epsilon(1e-12));
    }

  CHECK_THROWS_AS(gpca::common_components(LoadingMatrix(r, gpca::Identification::raw),
                                          MatrixSeries({Matrix::Zero(3, 3)}),
                                          LoadingMatrix(c, gpca::Identification::raw)),
                  gpca::DimensionError);
}

TEST_CASE("oracle_gpca exact recovery on noiseless data") {
  std::mt19937_64 rng(40);
  const Index p1 = 10, p2 = 8, k1 = 2, k2 = 2;
  const Matrix u = random_spd(p1, rng), v = random_spd(p2, rng);
  const auto d = make_data(41, 15, p1, p2, k1, k2, 0.0);
  const auto res = gpca::oracle_gpca(d.x, SeparableCovariance(u, v), k1, k2);
  for (Index t = 0; t < d.x.size(); ++t)
    CHECK((res.common[t] - d.x[t]).cwiseAbs().maxCoeff() < 1e-8);
  const Matrix u_half_inv = gpca::spd_inv_sqrt(u);
  CHECK(gpca::subspace_distance(Matrix(u_half_inv * res.row_loading.values),
                                Matrix(u_half_inv * d.r)) <= 1e-8);
}

TEST_CASE("identity covariance reduces to the projected estimator") {
  const Matrix u = Matrix::Identity(9, 9), v = Matrix::Identity(7, 7);
  const auto d = make_data(50, 30, 9, 7, 2, 2, 0.6);
  const auto a = gpca::oracle_gpca(d.x, SeparableCovariance(u, v), 2, 2);
  const auto b = gpca::pe_estimate(d.x, 2, 2);
  CHECK(loading_bytes_equal(a.row_loading, b.row_loading));
  CHECK(loading_bytes_equal(a.col_loading, b.col_loading));
  for (Index t = 0; t < d.x.size(); ++t)
    CHECK((a.common[t] - b.common[t]).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("identification constraint holds after the fit") {
  std::mt19937_64 rng(60);
  const Matrix u = random_spd(8, rng), v = random_spd(11, rng);
  const auto d = make_data(61, 40, 8, 11, 2, 3, 0.8, &u, &v);
  const auto res = gpca::oracle_gpca(d.x, SeparableCovariance(u, v), 2, 3);
  const Matrix rw = res.row_loading_whitened.values;
  const Matrix cw = res.col_loading_whitened.values;
  CHECK((Matrix(rw.transpose() * rw) / 8.0 - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() <
        1e-8);
  CHECK((Matrix(cw.transpose() * cw) / 11.0 - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() <
        1e-8);
  // Stored pieces reconstruct the common components.
  for (Index t = 0; t < d.x.size(); ++t) {
    const Matrix s = res.row_loading.values * res.factors[t] * res.col_loading.values.transpose();
    CHECK((s - res.common[t]).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((res.residuals[t] - (d.x[t] - res.common[t])).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("Kronecker scale ambiguity does not move spans or fits") {
  std::mt19937_64 rng(70);
  const Matrix u = random_spd(7, rng), v = random_spd(9, rng);
  const auto d = make_data(71, 25, 7, 9, 2, 2, 0.5, &u, &v);
  const double scale = 3.7;
  const auto a = gpca::oracle_gpca(d.x, SeparableCovariance(u, v), 2, 2);
  const auto b = gpca::oracle_gpca(
      d.x, SeparableCovariance(Matrix(scale * u), Matrix(v / scale)), 2, 2);
  CHECK((a.row_loading_whitened.values - b.row_loading_whitened.values).cwiseAbs().maxCoeff() <
        1e-10);
  CHECK((a.col_loading_whitened.values - b.col_loading_whitened.values).cwiseAbs().maxCoeff() <
        1e-10);
  for (Index t = 0; t < d.x.size(); ++t) {
    CHECK((a.factors[t] - b.factors[t]).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((a.common[t] - b.common[t]).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("objective trace is non-increasing") {
  std::mt19937_64 rng(80);
  for (int rep = 0; rep < 5; ++rep) {
    const Matrix u = random_spd(8, rng), v = random_spd(10, rng);
    const auto d = make_data(rng(), 30, 8, 10, 2, 2, 1.0, &u, &v);
    const auto res = gpca::oracle_gpca(d.x, SeparableCovariance(u, v), 2, 2);
    for (std::size_t i = 1; i < res.objective_trace.size(); ++i)
      CHECK(res.objective_trace[i] <= res.objective_trace[i - 1] + 1e-8);
  }
}

TEST_CASE("common components are invariant to rotating the loadings") {
  std::mt19937_64 rng(90);
  const auto d = make_data(91, 10, 8, 6, 2, 2, 0.4);
  const auto res = gpca::pe_estimate(d.x, 2, 2);
  const Matrix o1 = gpca::orthonormalize(random_matrix(2, 2, rng));
  const Matrix o2 = gpca::orthonormalize(random_matrix(2, 2, rng));
  std::vector<Matrix> rotated;
  for (const Matrix& f : res.factors) rotated.push_back(o1.transpose() * f * o2);
  const auto s2 = gpca::common_components(
      LoadingMatrix(Matrix(res.row_loading.values * o1), gpca::Identification::raw),
      MatrixSeries(std::move(rotated)),
      LoadingMatrix(Matrix(res.col_loading.values * o2), gpca::Identification::raw));
  for (Index t = 0; t < d.x.size(); ++t)
    CHECK((s2[t] - res.common[t]).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("alpha_pca_estimate produces a complete result") {
  const auto d = make_data(100, 20, 8, 7, 2, 2, 0.3);
  const auto res = gpca::alpha_pca_estimate(d.x, 2, 2);
  CHECK(res.method == gpca::Method::alpha_pca);
  CHECK(res.common.size() == 20);
  CHECK(gpca::subspace_distance(res.row_loading.values, d.r) < 0.5);
  for (Index t = 0; t < d.x.size(); ++t)
    CHECK((res.residuals[t] + res.common[t] - d.x[t]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("non-convergence is reported in diagnostics, not as an error") {
  std::mt19937_64 rng(110);
  const Matrix u = random_spd(8, rng), v = random_spd(8, rng);
  const auto d = make_data(111, 20, 8, 8, 2, 2, 2.0, &u, &v);
  gpca::GpcaOptions opts;
  opts.max_iter = 1;
  opts.tol = 1e-14;
  const auto res = gpca::oracle_gpca(d.x, SeparableCovariance(u, v), 2, 2, opts);
  CHECK(res.iterations == 1);
  CHECK_FALSE(res.converged);
}
