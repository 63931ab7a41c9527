#include <algorithm>
#include <vector>

#include "fcbgan/substrate/ops.hpp"
#include "gemm.hpp"

namespace fcbgan {

namespace {

struct ConvGeom {
  std::int64_t batch, cin, h, w;
  std::int64_t cout, k;
  std::int64_t ho, wo;
  int stride, pad;

  std::int64_t patch() const { return cin * k * k; }
  std::int64_t out_pixels() const { return ho * wo; }
};

ConvGeom make_geom(const Shape& x, const Shape& wshape, int stride, int pad, const char* op) {
  if (x.size() != 4 || wshape.size() != 4) {
    throw ShapeError(std::string(op) + ": expected rank-4 input and weight, got " + shape_str(x) + ", " +
                     shape_str(wshape));
  }
  if (wshape[2] != wshape[3]) throw ShapeError(std::string(op) + ": kernel must be square");
  if (stride < 1 || pad < 0) throw ShapeError(std::string(op) + ": stride must be >= 1 and pad >= 0");
  if (x[1] != wshape[1]) {
    throw ShapeError(std::string(op) + ": channel mismatch, input has " + std::to_string(x[1]) +
                     ", weight expects " + std::to_string(wshape[1]));
  }
  ConvGeom g{x[0], x[1], x[2], x[3], wshape[0], wshape[2], 0, 0, stride, pad};
  const std::int64_t span_h = x[2] + 2 * pad - g.k, span_w = x[3] + 2 * pad - g.k;
  if (span_h < 0 || span_w < 0 || span_h % stride || span_w % stride) {
    throw ShapeError(std::string(op) + ": non-integral output size for input " + shape_str(x) + ", kernel " +
                     std::to_string(g.k) + ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  g.ho = span_h / stride + 1;
  g.wo = span_w / stride + 1;
  return g;
}

// Column buffers hold several samples side by side: row r of the buffer is
// cols[r * ld + col0 + p] for output pixel p of one sample.
constexpr std::int64_t kMaxColumnElems = std::int64_t{1} << 22;

std::int64_t chunk_size(const ConvGeom& g) {
  const std::int64_t per = std::max<std::int64_t>(1, g.patch() * g.out_pixels());
  return std::clamp<std::int64_t>(kMaxColumnElems / per, 1, g.batch);
}

// Valid output columns [lo, hi) for kernel offset kx when stride is 1.
inline void valid_range(const ConvGeom& g, std::int64_t kx, std::int64_t& lo, std::int64_t& hi) {
  lo = std::clamp<std::int64_t>(g.pad - kx, 0, g.wo);
  hi = std::clamp<std::int64_t>(g.w + g.pad - kx, lo, g.wo);
}

// cols[(c*k + ky)*k + kx, oy*wo + ox] = x[c, oy*s + ky - pad, ox*s + kx - pad] (zero outside).
template <class T>
void im2col(const ConvGeom& g, const T* x, T* cols, std::int64_t ld) {
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * ld;
        std::int64_t lo = 0, hi = 0;
        if (g.stride == 1) valid_range(g, kx, lo, hi);
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride + ky - g.pad;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + iy) * g.w;
          if (g.stride == 1) {
            std::fill(dst, dst + lo, T(0));
            std::copy(src + lo + kx - g.pad, src + hi + kx - g.pad, dst + lo);
            std::fill(dst + hi, dst + g.wo, T(0));
            continue;
          }
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride + kx - g.pad;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const ConvGeom& g, const T* cols, std::int64_t ld, T* x) {
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * ld;
        std::int64_t lo = 0, hi = 0;
        if (g.stride == 1) valid_range(g, kx, lo, hi);
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = x + (c * g.h + iy) * g.w;
          const T* src = row + oy * g.wo;
          if (g.stride == 1) {
            T* d = dst + kx - g.pad;
            for (std::int64_t ox = lo; ox < hi; ++ox) d[ox] += src[ox];
            continue;
          }
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

// [nb, rows, n] sample-major <-> [rows, nb * n] row-major.
template <class T>
void gather_rows(const T* src, std::int64_t nb, std::int64_t rows, std::int64_t n, T* dst) {
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t r = 0; r < rows; ++r) std::copy_n(src + (b * rows + r) * n, n, dst + r * nb * n + b * n);
}

template <class T>
void scatter_rows(const T* src, std::int64_t nb, std::int64_t rows, std::int64_t n, T* dst) {
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t r = 0; r < rows; ++r) std::copy_n(src + r * nb * n + b * n, n, dst + (b * rows + r) * n);
}

template <class T>
void fill_columns(const ConvGeom& g, const T* x, std::int64_t b0, std::int64_t nb, T* cols) {
  const std::int64_t ld = nb * g.out_pixels();
  for (std::int64_t b = 0; b < nb; ++b) {
    im2col(g, x + (b0 + b) * g.cin * g.h * g.w, cols + b * g.out_pixels(), ld);
  }
}

// Stride-1 convolutions skip im2col: with every sample zero-padded to
// Hp x Wp and laid side by side, tap (ky, kx) is a plain GEMM against the
// padded input shifted by ky * Wp + kx columns. Outputs land on the padded
// grid and the extra columns are dropped.
struct ShiftLayout {
  std::int64_t hp, wp, plane, nb, cols, span;

  ShiftLayout(const ConvGeom& g, std::int64_t nb_) : nb(nb_) {
    hp = g.h + 2 * g.pad;
    wp = g.w + 2 * g.pad;
    plane = hp * wp;
    cols = nb * plane;
    span = cols - ((g.k - 1) * wp + (g.k - 1));
  }
  std::int64_t offset(const ConvGeom& g, std::int64_t tap) const { return (tap / g.k) * wp + tap % g.k; }
};

// Chunks small enough that the padded input and output stay in cache.
constexpr std::int64_t kShiftElems = std::int64_t{1} << 18;

std::int64_t shift_chunk(const ConvGeom& g) {
  const std::int64_t per = (g.cin + g.cout) * (g.h + 2 * g.pad) * (g.w + 2 * g.pad);
  return std::clamp<std::int64_t>(kShiftElems / std::max<std::int64_t>(per, 1), 1, g.batch);
}

// w [cout, cin, k, k] -> taps [k*k, cout, cin].
template <class T>
std::vector<T> pack_taps(const ConvGeom& g, const T* w) {
  const std::int64_t kk = g.k * g.k;
  std::vector<T> taps(static_cast<std::size_t>(kk * g.cout * g.cin));
  for (std::int64_t o = 0; o < g.cout; ++o)
    for (std::int64_t c = 0; c < g.cin; ++c)
      for (std::int64_t t = 0; t < kk; ++t) taps[(t * g.cout + o) * g.cin + c] = w[(o * g.cin + c) * kk + t];
  return taps;
}

// x [nb, c, h, w] (offset by `pad` inside each padded plane) <-> padded [c, nb * plane].
template <class T>
void pad_in(const ConvGeom& g, const ShiftLayout& l, std::int64_t channels, std::int64_t h, std::int64_t w,
            std::int64_t pad, const T* x, T* xp) {
  std::fill_n(xp, channels * l.cols, T(0));
  for (std::int64_t b = 0; b < l.nb; ++b)
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t y = 0; y < h; ++y) {
        std::copy_n(x + ((b * channels + c) * h + y) * w, w, xp + c * l.cols + b * l.plane + (y + pad) * l.wp + pad);
      }
  (void)g;
}

template <class T>
void conv_forward_shift(const ConvGeom& g, const T* x, const T* w, T* y) {
  const std::int64_t chunk = shift_chunk(g);
  const auto taps = pack_taps(g, w);
  ShiftLayout full(g, chunk);
  std::vector<T> xp(static_cast<std::size_t>(g.cin * full.cols)), yp(static_cast<std::size_t>(g.cout * full.cols));
  for (std::int64_t b0 = 0; b0 < g.batch; b0 += chunk) {
    ShiftLayout l(g, std::min(chunk, g.batch - b0));
    pad_in(g, l, g.cin, g.h, g.w, g.pad, x + b0 * g.cin * g.h * g.w, xp.data());
    for (std::int64_t t = 0; t < g.k * g.k; ++t) {
      detail::gemm_ld<T>(false, false, g.cout, l.span, g.cin, taps.data() + t * g.cout * g.cin, g.cin,
                         xp.data() + l.offset(g, t), l.cols, yp.data(), l.cols, t > 0);
    }
    for (std::int64_t b = 0; b < l.nb; ++b)
      for (std::int64_t o = 0; o < g.cout; ++o)
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          std::copy_n(yp.data() + o * l.cols + b * l.plane + oy * l.wp, g.wo,
                      y + (((b0 + b) * g.cout + o) * g.ho + oy) * g.wo);
        }
  }
}

template <class T>
void conv_input_grad_shift(const ConvGeom& g, const T* gy, const T* w, T* gx) {
  const std::int64_t chunk = shift_chunk(g);
  const auto taps = pack_taps(g, w);
  ShiftLayout full(g, chunk);
  std::vector<T> gyp(static_cast<std::size_t>(g.cout * full.cols)), gxp(static_cast<std::size_t>(g.cin * full.cols));
  for (std::int64_t b0 = 0; b0 < g.batch; b0 += chunk) {
    ShiftLayout l(g, std::min(chunk, g.batch - b0));
    pad_in(g, l, g.cout, g.ho, g.wo, 0, gy + b0 * g.cout * g.ho * g.wo, gyp.data());
    std::fill_n(gxp.data(), g.cin * l.cols, T(0));
    for (std::int64_t t = 0; t < g.k * g.k; ++t) {
      detail::gemm_ld<T>(true, false, g.cin, l.span, g.cout, taps.data() + t * g.cout * g.cin, g.cin, gyp.data(),
                         l.cols, gxp.data() + l.offset(g, t), l.cols, true);
    }
    for (std::int64_t b = 0; b < l.nb; ++b)
      for (std::int64_t c = 0; c < g.cin; ++c)
        for (std::int64_t iy = 0; iy < g.h; ++iy) {
          const T* src = gxp.data() + c * l.cols + b * l.plane + (iy + g.pad) * l.wp + g.pad;
          T* dst = gx + (((b0 + b) * g.cin + c) * g.h + iy) * g.w;
          for (std::int64_t ix = 0; ix < g.w; ++ix) dst[ix] += src[ix];
        }
  }
}

template <class T>
void conv_weight_grad_shift(const ConvGeom& g, const T* x, const T* gy, T* gw) {
  const std::int64_t chunk = shift_chunk(g), kk = g.k * g.k;
  ShiftLayout full(g, chunk);
  std::vector<T> xp(static_cast<std::size_t>(g.cin * full.cols)), gyp(static_cast<std::size_t>(g.cout * full.cols));
  std::vector<T> taps(static_cast<std::size_t>(kk * g.cout * g.cin), T(0));
  for (std::int64_t b0 = 0; b0 < g.batch; b0 += chunk) {
    ShiftLayout l(g, std::min(chunk, g.batch - b0));
    pad_in(g, l, g.cin, g.h, g.w, g.pad, x + b0 * g.cin * g.h * g.w, xp.data());
    pad_in(g, l, g.cout, g.ho, g.wo, 0, gy + b0 * g.cout * g.ho * g.wo, gyp.data());
    for (std::int64_t t = 0; t < kk; ++t) {
      detail::gemm_ld<T>(false, true, g.cout, g.cin, l.span, gyp.data(), l.cols, xp.data() + l.offset(g, t), l.cols,
                         taps.data() + t * g.cout * g.cin, g.cin, true);
    }
  }
  for (std::int64_t o = 0; o < g.cout; ++o)
    for (std::int64_t c = 0; c < g.cin; ++c)
      for (std::int64_t t = 0; t < kk; ++t) gw[(o * g.cin + c) * kk + t] += taps[(t * g.cout + o) * g.cin + c];
}

bool use_shift(const ConvGeom& g) { return g.stride == 1 && g.k > 1; }

// 1x1, stride 1, no padding: one GEMM per sample straight on the NCHW data.
bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

template <class T>
void conv_forward(const ConvGeom& g, const T* x, const T* w, T* y) {
  if (use_shift(g)) return conv_forward_shift(g, x, w, y);
  const std::int64_t np = g.out_pixels();
  if (is_pointwise(g)) {
    for (std::int64_t b = 0; b < g.batch; ++b) {
      detail::gemm<T>(false, false, g.cout, np, g.cin, w, x + b * g.cin * np, y + b * g.cout * np, false);
    }
    return;
  }
  const std::int64_t chunk = chunk_size(g);
  std::vector<T> cols(static_cast<std::size_t>(g.patch() * chunk * np));
  std::vector<T> out(static_cast<std::size_t>(g.cout * chunk * np));
  for (std::int64_t b0 = 0; b0 < g.batch; b0 += chunk) {
    const std::int64_t nb = std::min(chunk, g.batch - b0);
    fill_columns(g, x, b0, nb, cols.data());
    detail::gemm<T>(false, false, g.cout, nb * np, g.patch(), w, cols.data(), out.data(), false);
    scatter_rows(out.data(), nb, g.cout, np, y + b0 * g.cout * np);
  }
}

template <class T>
void conv_input_grad(const ConvGeom& g, const T* gy, const T* w, T* gx) {
  if (use_shift(g)) return conv_input_grad_shift(g, gy, w, gx);
  const std::int64_t np = g.out_pixels();
  if (is_pointwise(g)) {
    for (std::int64_t b = 0; b < g.batch; ++b) {
      detail::gemm<T>(true, false, g.cin, np, g.cout, w, gy + b * g.cout * np, gx + b * g.cin * np, false);
    }
    return;
  }
  const std::int64_t chunk = chunk_size(g);
  std::vector<T> cols(static_cast<std::size_t>(g.patch() * chunk * np));
  std::vector<T> gyc(static_cast<std::size_t>(g.cout * chunk * np));
  for (std::int64_t b0 = 0; b0 < g.batch; b0 += chunk) {
    const std::int64_t nb = std::min(chunk, g.batch - b0);
    gather_rows(gy + b0 * g.cout * np, nb, g.cout, np, gyc.data());
    detail::gemm<T>(true, false, g.patch(), nb * np, g.cout, w, gyc.data(), cols.data(), false);
    for (std::int64_t b = 0; b < nb; ++b) {
      col2im_add(g, cols.data() + b * np, nb * np, gx + (b0 + b) * g.cin * g.h * g.w);
    }
  }
}

template <class T>
void conv_weight_grad(const ConvGeom& g, const T* x, const T* gy, T* gw) {
  if (use_shift(g)) return conv_weight_grad_shift(g, x, gy, gw);
  const std::int64_t np = g.out_pixels();
  if (is_pointwise(g)) {
    for (std::int64_t b = 0; b < g.batch; ++b) {
      detail::gemm<T>(false, true, g.cout, g.cin, np, gy + b * g.cout * np, x + b * g.cin * np, gw, true);
    }
    return;
  }
  const std::int64_t chunk = chunk_size(g);
  std::vector<T> cols(static_cast<std::size_t>(g.patch() * chunk * np));
  std::vector<T> gyc(static_cast<std::size_t>(g.cout * chunk * np));
  for (std::int64_t b0 = 0; b0 < g.batch; b0 += chunk) {
    const std::int64_t nb = std::min(chunk, g.batch - b0);
    fill_columns(g, x, b0, nb, cols.data());
    gather_rows(gy + b0 * g.cout * np, nb, g.cout, np, gyc.data());
    detail::gemm<T>(false, true, g.cout, g.patch(), nb * np, gyc.data(), cols.data(), gw, true);
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const ConvGeom g = make_geom(x.shape(), w.shape(), stride, pad, "conv2d");
  require_same_dtype(x.value(), w.value(), "conv2d");
  if (b.defined()) {
    require_same_dtype(x.value(), b.value(), "conv2d");
    if (b.shape() != Shape{g.cout}) {
      throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " for " + std::to_string(g.cout) + " output channels");
    }
  }
  Tensor out = Tensor::uninitialized({g.batch, g.cout, g.ho, g.wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    T* y = out.data<T>().data();
    conv_forward<T>(g, x.value().data<T>().data(), w.value().data<T>().data(), y);
    if (!b.defined()) return;
    const T* bias = b.value().data<T>().data();
    const std::int64_t np = g.out_pixels();
    for (std::int64_t n = 0; n < g.batch; ++n)
      for (std::int64_t o = 0; o < g.cout; ++o) {
        T* row = y + (n * g.cout + o) * np;
        for (std::int64_t i = 0; i < np; ++i) row[i] += bias[o];
      }
  });
  Shape xs = x.shape(), ws = w.shape();
  return make_result(std::move(out), "conv2d", {x, w, b},
                     [x, w, xs, ws, stride, pad](const Var& gy, const std::vector<bool>& needs) {
                       std::vector<Var> r(3);
                       if (needs[0]) r[0] = conv2d_input_grad(gy, w, xs, stride, pad);
                       if (needs[1]) r[1] = conv2d_weight_grad(x, gy, ws, stride, pad);
                       if (needs[2]) r[2] = sum_to_channels(gy);
                       return r;
                     });
}

Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& input_shape, int stride, int pad) {
  const ConvGeom g = make_geom(input_shape, w.shape(), stride, pad, "conv2d_input_grad");
  if (grad_out.shape() != Shape{g.batch, g.cout, g.ho, g.wo}) {
    throw ShapeError("conv2d_input_grad: grad shape " + shape_str(grad_out.shape()) + " does not match geometry");
  }
  require_same_dtype(grad_out.value(), w.value(), "conv2d_input_grad");
  Tensor out(input_shape, w.dtype());
  dispatch(w.dtype(), [&]<class T>() {
    conv_input_grad<T>(g, grad_out.value().data<T>().data(), w.value().data<T>().data(), out.data<T>().data());
  });
  Shape ws = w.shape();
  return make_result(std::move(out), "conv2d_input_grad", {grad_out, w},
                     [grad_out, w, ws, stride, pad](const Var& up, const std::vector<bool>& needs) {
                       std::vector<Var> r(2);
                       if (needs[0]) r[0] = conv2d(up, w, Var(), stride, pad);
                       if (needs[1]) r[1] = conv2d_weight_grad(up, grad_out, ws, stride, pad);
                       return r;
                     });
}

Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& weight_shape, int stride, int pad) {
  const ConvGeom g = make_geom(x.shape(), weight_shape, stride, pad, "conv2d_weight_grad");
  if (grad_out.shape() != Shape{g.batch, g.cout, g.ho, g.wo}) {
    throw ShapeError("conv2d_weight_grad: grad shape " + shape_str(grad_out.shape()) + " does not match geometry");
  }
  require_same_dtype(x.value(), grad_out.value(), "conv2d_weight_grad");
  Tensor out(weight_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    conv_weight_grad<T>(g, x.value().data<T>().data(), grad_out.value().data<T>().data(), out.data<T>().data());
  });
  Shape xs = x.shape();
  return make_result(std::move(out), "conv2d_weight_grad", {x, grad_out},
                     [x, grad_out, xs, stride, pad](const Var& up, const std::vector<bool>& needs) {
                       std::vector<Var> r(2);
                       if (needs[0]) r[0] = conv2d_input_grad(grad_out, up, xs, stride, pad);
                       if (needs[1]) r[1] = conv2d(x, up, Var(), stride, pad);
                       return r;
                     });
}

}  // namespace fcbgan
