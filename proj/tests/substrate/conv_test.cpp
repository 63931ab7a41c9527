#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace fcbgan;
using fcbgan::testing::check_op;
using fcbgan::testing::project;
using fcbgan::testing::random_var;

namespace {

// Direct loop-nest convolution, used as an independent oracle.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), k = w.dim(2);
  const auto Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor y({B, O, Ho, Wo}, DType::f64);
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          double acc = b ? b->at(o) : 0.0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t p = 0; p < k; ++p)
              for (std::int64_t q = 0; q < k; ++q) {
                const auto yy = i * stride - pad + p, xx = j * stride - pad + q;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                acc += x.at(((n * C + c) * H + yy) * W + xx) * w.at(((o * C + c) * k + p) * k + q);
              }
          y.set(((n * O + o) * Ho + i) * Wo + j, acc);
        }
  return y;
}

struct Geometry {
  int k, stride, pad;
  std::int64_t size;
};

}  // namespace

TEST(Conv2d, IdentityKernel) {
  Var x(Tensor::full({1, 1, 2, 2}, 1.0, DType::f64));
  Var w(Tensor::full({1, 1, 1, 1}, 1.0, DType::f64));
  Var b(Tensor::zeros({1}, DType::f64));
  EXPECT_TRUE(conv2d(x, w, b, 1, 0).value().identical(x.value()));
}

TEST(Conv2d, BiasOnly) {
  Rng r(1);
  Var x(Tensor::zeros({2, 3, 4, 4}, DType::f64));
  Var w(r.normal_tensor({5, 3, 3, 3}, 1.0, DType::f64));
  Var b(Tensor::full({5}, 0.5, DType::f64));
  Tensor y = conv2d(x, w, b, 1, 1).value();
  ASSERT_EQ(y.shape(), (Shape{2, 5, 4, 4}));
  for (double v : y.to_vector()) EXPECT_EQ(v, 0.5);
}

TEST(Conv2d, FiniteDifferenceExample) {
  Rng r(11);
  Var x = random_var(r, {1, 2, 4, 4}), w = random_var(r, {2, 2, 3, 3}), b = random_var(r, {2});
  GradCheckOptions o;
  o.step = 1e-4;
  EXPECT_LT(check_op([&] { return conv2d(x, w, b, 1, 1); }, {x, w, b}, 3, o), 1e-4);
}

TEST(Conv2d, MatchesLoopNestOracle) {
  const Geometry geoms[] = {{3, 1, 1, 5}, {1, 1, 0, 4}, {3, 2, 1, 5}, {1, 2, 0, 5}, {3, 1, 0, 4}};
  Rng r(2);
  for (const auto& g : geoms) {
    for (DType dt : {DType::f64, DType::f32}) {
      Tensor x = r.normal_tensor({2, 3, g.size, g.size}, 1.0, dt);
      Tensor w = r.normal_tensor({4, 3, g.k, g.k}, 1.0, dt);
      Tensor b = r.normal_tensor({4}, 1.0, dt);
      Tensor y = conv2d(Var(x), Var(w), Var(b), g.stride, g.pad).value();
      Tensor x64 = x.to(DType::f64), w64 = w.to(DType::f64), b64 = b.to(DType::f64);
      Tensor want = naive_conv(x64, w64, &b64, g.stride, g.pad);
      ASSERT_EQ(y.shape(), want.shape());
      const double tol = dt == DType::f64 ? 1e-12 : 1e-4;
      for (std::int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.at(i), want.at(i), tol);
    }
  }
}

TEST(Conv2d, GradcheckOverRandomGeometries) {
  const Geometry geoms[] = {{3, 1, 1, 4}, {1, 1, 0, 3}, {3, 2, 1, 5}, {1, 2, 0, 3}};
  for (int seed = 0; seed < 20; ++seed) {
    Rng r(static_cast<std::uint64_t>(seed) + 100);
    const auto& g = geoms[seed % 4];
    const auto B = 1 + static_cast<std::int64_t>(r.below(2)), C = 1 + static_cast<std::int64_t>(r.below(3)),
               O = 1 + static_cast<std::int64_t>(r.below(3));
    Var x = random_var(r, {B, C, g.size, g.size}), w = random_var(r, {O, C, g.k, g.k}), b = random_var(r, {O});
    const int stride = g.stride, pad = g.pad;
    EXPECT_LT(check_op([&] { return conv2d(x, w, b, stride, pad); }, {x, w, b}, seed), 1e-4) << "seed " << seed;
  }
}

TEST(Conv2d, GradientOpsAreDifferentiable) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng r(static_cast<std::uint64_t>(seed) + 300);
    const int stride = seed % 2 ? 2 : 1;
    const std::int64_t size = stride == 2 ? 5 : 4;
    Var x = random_var(r, {1, 2, size, size}), w = random_var(r, {2, 2, 3, 3});
    const Shape out = conv2d(x, w, Var(), stride, 1).shape();
    Var go = random_var(r, out);
    EXPECT_LT(check_op([&] { return conv2d_input_grad(go, w, x.shape(), stride, 1); }, {go, w}, seed), 1e-4);
    EXPECT_LT(check_op([&] { return conv2d_weight_grad(x, go, w.shape(), stride, 1); }, {x, go}, seed), 1e-4);
  }
}

TEST(Conv2d, Errors) {
  Var x(Tensor::zeros({1, 2, 4, 4})), w(Tensor::zeros({3, 3, 3, 3}));
  EXPECT_THROW(conv2d(x, w, Var(), 1, 1), ShapeError);
  Var w2(Tensor::zeros({3, 2, 3, 3}));
  // (4 + 2 - 3) / 2 + 1 is not integral.
  EXPECT_THROW(conv2d(x, w2, Var(), 2, 1), ShapeError);
}
