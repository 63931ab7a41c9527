#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "fcbgan/substrate/layers.hpp"
#include "fcbgan/substrate/spectral_norm.hpp"
#include "test_support.hpp"

using namespace fcbgan;

namespace {

Eigen::MatrixXd as_matrix(const Tensor& t) {
  const auto rows = t.dim(0), cols = t.numel() / rows;
  Eigen::MatrixXd m(rows, cols);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) m(i, j) = t.at(i * cols + j);
  return m;
}

double top_singular_value(const Tensor& t) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(as_matrix(t));
  return svd.singularValues()(0);
}

SpectralResult normalize_fresh(Param& p, std::uint64_t seed, int n_iter) {
  Rng r(seed);
  init_spectral_state(p, r, 0);
  return spectral_normalize(p, n_iter);
}

}  // namespace

TEST(SpectralNorm, DiagonalExample) {
  Param p("w", Tensor::from({2, 2}, {3, 0, 0, 1}, DType::f64));
  auto res = normalize_fresh(p, 1, 50);
  EXPECT_NEAR(res.sigma, 3.0, 1e-3);
  EXPECT_NEAR(top_singular_value(res.weight.value()), 1.0, 1e-3);
}

TEST(SpectralNorm, IsotropicMatrix) {
  // Scaled rotation: every singular value equals 2.5.
  const double s = 2.5, a = 0.7;
  Param p("w", Tensor::from({2, 2}, {s * std::cos(a), -s * std::sin(a), s * std::sin(a), s * std::cos(a)}, DType::f64));
  auto res = normalize_fresh(p, 2, 50);
  for (std::int64_t i = 0; i < 4; ++i) EXPECT_NEAR(res.weight.value().at(i), p.value().at(i) / s, 1e-3);
}

TEST(SpectralNorm, Random8x8AgainstSvd) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng r(seed + 40);
    Param p("w", r.normal_tensor({8, 8}, 1.0, DType::f64));
    auto res = normalize_fresh(p, seed, 100);
    EXPECT_NEAR(res.sigma, top_singular_value(p.value()), 1e-3) << "seed " << seed;
  }
}

TEST(SpectralNorm, StateVectorsStayUnitNorm) {
  Rng r(3);
  Param p("w", r.normal_tensor({4, 2, 3, 3}, 1.0, DType::f64));
  init_spectral_state(p, r);
  for (int i = 0; i < 5; ++i) {
    spectral_normalize(p, 1);
    for (const Tensor* v : {&p.spectral()->u, &p.spectral()->v}) {
      double n = 0;
      for (std::int64_t k = 0; k < v->numel(); ++k) n += v->at(k) * v->at(k);
      EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
    }
  }
}

TEST(SpectralNorm, ZeroMatrixRaises) {
  Rng r(4);
  Param p("w", Tensor::zeros({3, 3}, DType::f64));
  EXPECT_THROW(init_spectral_state(p, r), ZeroSpectrumError);
  Param q("w", r.normal_tensor({3, 3}, 1.0, DType::f64));
  init_spectral_state(q, r);
  q.mutable_value().fill(0.0);
  EXPECT_THROW(spectral_normalize(q, 1), ZeroSpectrumError);
}

TEST(SpectralNorm, ZeroIterationsLeavesStateUntouched) {
  Rng r(5);
  Param p("w", r.normal_tensor({3, 4}, 1.0, DType::f64));
  init_spectral_state(p, r);
  Tensor u = p.spectral()->u, v = p.spectral()->v;
  spectral_normalize(p, 0);
  EXPECT_TRUE(p.spectral()->u.identical(u));
  EXPECT_TRUE(p.spectral()->v.identical(v));
}

TEST(SpectralNorm, GradientTreatsSingularVectorsAsConstants) {
  // With u, v frozen, d/dW of sum(R * W / (u^T W v)) has a closed form.
  Rng r(6);
  Param p("w", r.normal_tensor({3, 4}, 1.0, DType::f64));
  init_spectral_state(p, r);
  Tensor R = r.normal_tensor({3, 4}, 1.0, DType::f64);
  Var loss = sum(mul(spectral_normalize(p, 0).weight, Var(R)));
  backward(loss);
  const auto& u = p.spectral()->u;
  const auto& v = p.spectral()->v;
  double sigma = 0, rw = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      sigma += u.at(i) * p.value().at(i * 4 + j) * v.at(j);
      rw += R.at(i * 4 + j) * p.value().at(i * 4 + j);
    }
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      const double want = R.at(i * 4 + j) / sigma - rw / (sigma * sigma) * u.at(i) * v.at(j);
      EXPECT_NEAR(p.var().grad()->at(i * 4 + j), want, 1e-12);
    }
}

TEST(SpectralNorm, TrainingForwardRunsOneIterationEvalRunsNone) {
  Rng r(7);
  Conv2d conv(2, 3, r, {.kernel = 3, .stride = 1, .pad = 1, .bias = true, .spectral = true});
  conv.to(DType::f64);
  Tensor u0 = conv.weight().spectral()->u;
  conv.set_training(false);
  conv.effective_weight();
  EXPECT_TRUE(conv.weight().spectral()->u.identical(u0));
  conv.set_training(true);
  conv.effective_weight();
  EXPECT_FALSE(conv.weight().spectral()->u.identical(u0));
}
