#include "fcbgan/substrate/spectral_norm.hpp"

#include <cmath>

#include "gemm.hpp"

namespace fcbgan {

namespace {

std::pair<std::int64_t, std::int64_t> matrix_dims(const Tensor& w) {
  const std::int64_t rows = w.dim(0);
  return {rows, w.numel() / rows};
}

template <class T>
double normalize(std::span<T> x) {
  double sq = 0.0;
  for (T v : x) sq += static_cast<double>(v) * v;
  const double n = std::sqrt(sq);
  if (n == 0.0) throw ZeroSpectrumError("spectral_normalize: zero weight matrix");
  for (T& v : x) v = static_cast<T>(v / n);
  return n;
}

// v <- normalize(W^T u); u <- normalize(W v), repeated n times.
template <class T>
void power_steps(const Tensor& w, Tensor& u, Tensor& v, int n) {
  auto [rows, cols] = matrix_dims(w);
  const T* wm = w.data<T>().data();
  for (int i = 0; i < n; ++i) {
    detail::gemm<T>(true, false, cols, 1, rows, wm, u.data<T>().data(), v.data<T>().data(), false);
    normalize(v.data<T>());
    detail::gemm<T>(false, false, rows, 1, cols, wm, v.data<T>().data(), u.data<T>().data(), false);
    normalize(u.data<T>());
  }
}

void random_unit_state(const Tensor& w, Rng& rng, Tensor& u, Tensor& v) {
  auto [rows, cols] = matrix_dims(w);
  u = rng.normal_tensor({rows}, 1.0, w.dtype());
  v = rng.normal_tensor({cols}, 1.0, w.dtype());
  dispatch(w.dtype(), [&]<class T>() {
    normalize(u.data<T>());
    normalize(v.data<T>());
  });
}

}  // namespace

void init_spectral_state(Param& w, Rng& rng, int warmup_iters) {
  SpectralState s;
  random_unit_state(w.value(), rng, s.u, s.v);
  dispatch(w.value().dtype(), [&]<class T>() { power_steps<T>(w.value(), s.u, s.v, warmup_iters); });
  w.spectral() = std::move(s);
}

SpectralResult spectral_normalize(Param& w, int n_iter) {
  if (!w.spectral()) throw std::logic_error("spectral_normalize: state not initialized for " + w.name());
  auto& s = *w.spectral();
  auto [rows, cols] = matrix_dims(w.value());
  if (s.u.shape() != Shape{rows} || s.v.shape() != Shape{cols}) {
    throw ShapeError("spectral_normalize: state shape does not match weight " + w.name());
  }
  dispatch(w.value().dtype(), [&]<class T>() { power_steps<T>(w.value(), s.u, s.v, n_iter); });

  Var wmat = reshape(w.var(), {rows, cols});
  Var u(s.u.reshaped({rows, 1}));
  Var v(s.v.reshaped({cols, 1}));
  Var sigma = sum(mul(matmul(wmat, v), u));
  const double sv = sigma.value().at(0);
  if (!(std::abs(sv) > 0.0)) throw ZeroSpectrumError("spectral_normalize: sigma estimate is zero for " + w.name());
  return {scale_by(w.var(), reciprocal(sigma)), sv};
}

double power_iteration_sigma(const Tensor& matrix_like, Rng& rng, int n_iter) {
  Tensor u, v;
  random_unit_state(matrix_like, rng, u, v);
  return dispatch(matrix_like.dtype(), [&]<class T>() {
    power_steps<T>(matrix_like, u, v, n_iter);
    auto [rows, cols] = matrix_dims(matrix_like);
    Tensor wv({rows}, matrix_like.dtype());
    detail::gemm<T>(false, false, rows, 1, cols, matrix_like.data<T>().data(), v.data<T>().data(),
                    wv.data<T>().data(), false);
    double s = 0.0;
    for (std::int64_t i = 0; i < rows; ++i) s += static_cast<double>(u.data<T>()[i]) * wv.data<T>()[i];
    return s;
  });
}

}  // namespace fcbgan
