#include "fcbgan/substrate/ops.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "gemm.hpp"

namespace fcbgan {

namespace {

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out = Tensor::uninitialized(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < a.size(); ++i) o[i] = f(a[i]);
  });
  return out;
}

// Like map_unary, but `f` maps an Eigen array view to an array expression, so
// transcendental functions vectorize.
template <class F>
Tensor map_array(const Tensor& x, F f) {
  Tensor out = Tensor::uninitialized(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    auto a = x.data<T>();
    auto o = out.data<T>();
    const auto n = static_cast<Eigen::Index>(a.size());
    Eigen::Map<Arr>(o.data(), n) = f(Eigen::Map<const Arr>(a.data(), n));
  });
  return out;
}

template <class T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> row_map(const T* p, std::int64_t n) {
  return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(n));
}

template <class F>
Tensor map_binary(const Tensor& x, const Tensor& y, const char* op, F f) {
  require_same_shape(x, y, op);
  Tensor out = Tensor::uninitialized(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.data<T>();
    auto b = y.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < a.size(); ++i) o[i] = f(a[i], b[i]);
  });
  return out;
}

void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

void require_scalar(const Var& s, const char* op) {
  if (s.value().numel() != 1) {
    throw ShapeError(std::string(op) + ": expected a one-element tensor, got " + shape_str(s.shape()));
  }
}

// Splits a rank-2/4 shape around dim 1 into (outer, channels, inner).
struct ChannelSplit {
  std::int64_t outer, channels, inner;
};
ChannelSplit split_channels(const Shape& s, const char* op) {
  if (s.size() == 2) return {s[0], s[1], 1};
  if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
  throw ShapeError(std::string(op) + ": expected rank 2 or 4, got " + shape_str(s));
}

// (outer, extent along dim, inner) for rank-N shapes.
struct DimSplit {
  std::int64_t outer, extent, inner;
};
DimSplit split_dim(const Shape& s, int dim, const char* op) {
  if (dim < 0 || dim >= static_cast<int>(s.size()) || dim > 1) {
    throw ShapeError(std::string(op) + ": dim must be 0 or 1 and within rank, got " + std::to_string(dim));
  }
  DimSplit d{1, s[static_cast<std::size_t>(dim)], 1};
  for (int i = 0; i < dim; ++i) d.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(dim) + 1; i < s.size(); ++i) d.inner *= s[i];
  return d;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  Tensor out = map_binary(a.value(), b.value(), "add", [](auto x, auto y) { return x + y; });
  return make_result(std::move(out), "add", {a, b}, [](const Var& g, const std::vector<bool>& needs) {
    std::vector<Var> r(2);
    if (needs[0]) r[0] = g;
    if (needs[1]) r[1] = g;
    return r;
  });
}

Var sub(const Var& a, const Var& b) {
  Tensor out = map_binary(a.value(), b.value(), "sub", [](auto x, auto y) { return x - y; });
  return make_result(std::move(out), "sub", {a, b}, [](const Var& g, const std::vector<bool>& needs) {
    std::vector<Var> r(2);
    if (needs[0]) r[0] = g;
    if (needs[1]) r[1] = scale(g, -1.0);
    return r;
  });
}

Var mul(const Var& a, const Var& b) {
  Tensor out = map_binary(a.value(), b.value(), "mul", [](auto x, auto y) { return x * y; });
  return make_result(std::move(out), "mul", {a, b}, [a, b](const Var& g, const std::vector<bool>& needs) {
    std::vector<Var> r(2);
    if (needs[0]) r[0] = mul(g, b);
    if (needs[1]) r[1] = mul(g, a);
    return r;
  });
}

Var scale(const Var& x, double c) {
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    const T k = static_cast<T>(c);
    return map_unary(x.value(), [k](T v) { return v * k; });
  });
  return make_result(std::move(out), "scale", {x}, [c](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{scale(g, c)};
  });
}

Var add_scalar(const Var& x, double c) {
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    const T k = static_cast<T>(c);
    return map_unary(x.value(), [k](T v) { return v + k; });
  });
  return make_result(std::move(out), "add_scalar", {x},
                     [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{g}; });
}

Var scale_by(const Var& x, const Var& s) {
  require_scalar(s, "scale_by");
  require_same_dtype(x.value(), s.value(), "scale_by");
  const double k = s.value().at(0);
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    const T kt = static_cast<T>(k);
    return map_unary(x.value(), [kt](T v) { return v * kt; });
  });
  return make_result(std::move(out), "scale_by", {x, s}, [x, s](const Var& g, const std::vector<bool>& needs) {
    std::vector<Var> r(2);
    if (needs[0]) r[0] = scale_by(g, s);
    if (needs[1]) r[1] = reshape(sum(mul(g, x)), s.shape());
    return r;
  });
}

Var reciprocal(const Var& s) {
  Tensor out = map_unary(s.value(), [](auto v) { return decltype(v)(1) / v; });
  return make_result(std::move(out), "reciprocal", {s}, [s](const Var& g, const std::vector<bool>&) {
    Var r = reciprocal(s);
    return std::vector<Var>{scale(mul(g, mul(r, r)), -1.0)};
  });
}

// ---------------------------------------------------------------- activations

Var relu(const Var& x) {
  Tensor out = map_unary(x.value(), [](auto v) { return v > 0 ? v : decltype(v)(0); });
  return make_result(std::move(out), "relu", {x}, [x](const Var& g, const std::vector<bool>&) {
    Tensor mask = map_unary(x.value(), [](auto v) { return v > 0 ? decltype(v)(1) : decltype(v)(0); });
    return std::vector<Var>{mul(g, Var(std::move(mask)))};
  });
}

Var sigmoid(const Var& x) {
  // exp(-v) may overflow to inf for very negative v, which still yields 0.
  Tensor out = map_array(x.value(), [](const auto& a) { return (1 + (-a).exp()).inverse(); });
  Tensor y = out;
  return make_result(std::move(out), "sigmoid", {x}, [x, y](const Var& g, const std::vector<bool>&) {
    if (GradMode::enabled()) {
      Var s = sigmoid(x);
      return std::vector<Var>{mul(g, mul(s, add_scalar(scale(s, -1.0), 1.0)))};
    }
    Tensor d = map_unary(y, [](auto v) { return v * (decltype(v)(1) - v); });
    return std::vector<Var>{mul(g, Var(std::move(d)))};
  });
}

Var tanh(const Var& x) {
  Tensor out = map_array(x.value(), [](const auto& a) { return a.tanh(); });
  Tensor y = out;
  return make_result(std::move(out), "tanh", {x}, [x, y](const Var& g, const std::vector<bool>&) {
    if (GradMode::enabled()) {
      Var t = tanh(x);
      return std::vector<Var>{mul(g, add_scalar(scale(mul(t, t), -1.0), 1.0))};
    }
    Tensor d = map_unary(y, [](auto v) { return decltype(v)(1) - v * v; });
    return std::vector<Var>{mul(g, Var(std::move(d)))};
  });
}

Var softplus(const Var& x) {
  Tensor out = map_array(x.value(), [](const auto& a) { return a.max(0) + (-a.abs()).exp().log1p(); });
  return make_result(std::move(out), "softplus", {x}, [x](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{mul(g, sigmoid(x))};
  });
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& x) {
  Tensor out({1}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    // Accumulate in double for both dtypes; order is fixed so results are reproducible.
    double acc = 0.0;
    for (T v : x.value().data<T>()) acc += static_cast<double>(v);
    out.data<T>()[0] = static_cast<T>(acc);
  });
  Shape shape = x.shape();
  return make_result(std::move(out), "sum", {x}, [shape](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{expand(g, shape)};
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

Var expand(const Var& s, const Shape& shape) {
  require_scalar(s, "expand");
  Tensor out = Tensor::full(shape, s.value().at(0), s.dtype());
  Shape src = s.shape();
  return make_result(std::move(out), "expand", {s}, [src](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{reshape(sum(g), src)};
  });
}

// ---------------------------------------------------------------- shape ops

Var reshape(const Var& x, const Shape& shape) {
  if (shape == x.shape()) return x;
  Tensor out = x.value().reshaped(shape);
  Shape src = x.shape();
  return make_result(std::move(out), "reshape", {x}, [src](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{reshape(g, src)};
  });
}

Var transpose(const Var& x) {
  require_rank(x, 2, "transpose");
  const auto rows = x.shape()[0], cols = x.shape()[1];
  Tensor out({cols, rows}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < cols; ++j) o[j * rows + i] = a[i * cols + j];
  });
  return make_result(std::move(out), "transpose", {x}, [](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{transpose(g)};
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require_same_dtype(a.value(), b.value(), "matmul");
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    detail::gemm<T>(false, false, m, n, k, a.value().data<T>().data(), b.value().data<T>().data(),
                    out.data<T>().data(), false);
  });
  return make_result(std::move(out), "matmul", {a, b}, [a, b](const Var& g, const std::vector<bool>& needs) {
    std::vector<Var> r(2);
    if (needs[0]) r[0] = matmul(g, transpose(b));
    if (needs[1]) r[1] = matmul(transpose(a), g);
    return r;
  });
}

Var dense(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 2, "dense");
  require_rank(w, 2, "dense");
  if (x.shape()[1] != w.shape()[1]) {
    throw ShapeError("dense: input features " + std::to_string(x.shape()[1]) + " vs weight " +
                     shape_str(w.shape()));
  }
  Var y = matmul(x, transpose(w));
  return b.defined() ? add_channel_bias(y, b) : y;
}

Var add_channel_bias(const Var& x, const Var& b) {
  auto sp = split_channels(x.shape(), "add_channel_bias");
  require_rank(b, 1, "add_channel_bias");
  require_same_dtype(x.value(), b.value(), "add_channel_bias");
  if (b.shape()[0] != sp.channels) {
    throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) + " for input " + shape_str(x.shape()));
  }
  Tensor out = Tensor::uninitialized(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    auto bb = b.value().data<T>();
    for (std::int64_t n = 0; n < sp.outer; ++n)
      for (std::int64_t c = 0; c < sp.channels; ++c) {
        const std::int64_t off = (n * sp.channels + c) * sp.inner;
        const T bc = bb[c];
        for (std::int64_t i = 0; i < sp.inner; ++i) o[off + i] = a[off + i] + bc;
      }
  });
  return make_result(std::move(out), "add_channel_bias", {x, b}, [](const Var& g, const std::vector<bool>& needs) {
    std::vector<Var> r(2);
    if (needs[0]) r[0] = g;
    if (needs[1]) r[1] = sum_to_channels(g);
    return r;
  });
}

Var sum_to_channels(const Var& x) {
  auto sp = split_channels(x.shape(), "sum_to_channels");
  Tensor out({sp.channels}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    for (std::int64_t c = 0; c < sp.channels; ++c) {
      double acc = 0.0;
      for (std::int64_t n = 0; n < sp.outer; ++n) {
        const T* row = a.data() + (n * sp.channels + c) * sp.inner;
        for (std::int64_t i = 0; i < sp.inner; ++i) acc += row[i];
      }
      o[c] = static_cast<T>(acc);
    }
  });
  Shape like = x.shape();
  return make_result(std::move(out), "sum_to_channels", {x}, [like](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{broadcast_channels(g, like)};
  });
}

Var broadcast_channels(const Var& b, const Shape& like) {
  require_rank(b, 1, "broadcast_channels");
  auto sp = split_channels(like, "broadcast_channels");
  if (b.shape()[0] != sp.channels) throw ShapeError("broadcast_channels: channel count mismatch");
  Tensor out(like, b.dtype());
  dispatch(b.dtype(), [&]<class T>() {
    auto o = out.data<T>();
    auto bb = b.value().data<T>();
    for (std::int64_t n = 0; n < sp.outer; ++n)
      for (std::int64_t c = 0; c < sp.channels; ++c)
        std::fill_n(o.data() + (n * sp.channels + c) * sp.inner, sp.inner, bb[c]);
  });
  return make_result(std::move(out), "broadcast_channels", {b}, [](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{sum_to_channels(g)};
  });
}

Var concat(const Var& a, const Var& b, int dim) {
  require_same_dtype(a.value(), b.value(), "concat");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size()) throw ShapeError("concat: rank mismatch");
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (static_cast<int>(i) != dim && sa[i] != sb[i]) {
      throw ShapeError("concat: shapes " + shape_str(sa) + " and " + shape_str(sb) + " differ off dim " +
                       std::to_string(dim));
    }
  }
  auto da = split_dim(sa, dim, "concat");
  auto db = split_dim(sb, dim, "concat");
  Shape so = sa;
  so[static_cast<std::size_t>(dim)] += sb[static_cast<std::size_t>(dim)];
  Tensor out(so, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto pa = a.value().data<T>();
    auto pb = b.value().data<T>();
    auto o = out.data<T>();
    const std::int64_t ca = da.extent * da.inner, cb = db.extent * db.inner;
    for (std::int64_t n = 0; n < da.outer; ++n) {
      std::copy_n(pa.data() + n * ca, ca, o.data() + n * (ca + cb));
      std::copy_n(pb.data() + n * cb, cb, o.data() + n * (ca + cb) + ca);
    }
  });
  const std::int64_t ea = da.extent, eb = db.extent;
  return make_result(std::move(out), "concat", {a, b}, [dim, ea, eb](const Var& g, const std::vector<bool>& needs) {
    std::vector<Var> r(2);
    if (needs[0]) r[0] = slice(g, dim, 0, ea);
    if (needs[1]) r[1] = slice(g, dim, ea, eb);
    return r;
  });
}

Var concat_channels(const Var& a, const Var& b) { return concat(a, b, 1); }

Var slice(const Var& x, int dim, std::int64_t start, std::int64_t length) {
  auto d = split_dim(x.shape(), dim, "slice");
  if (start < 0 || length < 1 || start + length > d.extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for " + shape_str(x.shape()));
  }
  Shape so = x.shape();
  so[static_cast<std::size_t>(dim)] = length;
  Tensor out(so, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    for (std::int64_t n = 0; n < d.outer; ++n)
      std::copy_n(a.data() + (n * d.extent + start) * d.inner, length * d.inner, o.data() + n * length * d.inner);
  });
  const std::int64_t total = d.extent;
  return make_result(std::move(out), "slice", {x}, [dim, start, total](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{embed(g, dim, start, total)};
  });
}

Var embed(const Var& x, int dim, std::int64_t start, std::int64_t total) {
  auto d = split_dim(x.shape(), dim, "embed");
  if (start < 0 || start + d.extent > total) throw ShapeError("embed: range out of bounds");
  Shape so = x.shape();
  so[static_cast<std::size_t>(dim)] = total;
  Tensor out(so, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    for (std::int64_t n = 0; n < d.outer; ++n)
      std::copy_n(a.data() + n * d.extent * d.inner, d.extent * d.inner, o.data() + (n * total + start) * d.inner);
  });
  const std::int64_t length = d.extent;
  return make_result(std::move(out), "embed", {x}, [dim, start, length](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{slice(g, dim, start, length)};
  });
}

// ---------------------------------------------------------------- spatial

Var upsample_nearest2x(const Var& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const auto& s = x.shape();
  const std::int64_t planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor out = Tensor::uninitialized({s[0], s[1], 2 * h, 2 * w}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = a.data() + p * h * w;
      T* dst = o.data() + p * 4 * h * w;
      for (std::int64_t i = 0; i < h; ++i) {
        T* row = dst + 2 * i * 2 * w;
        for (std::int64_t j = 0; j < w; ++j) row[2 * j] = row[2 * j + 1] = src[i * w + j];
        std::copy_n(row, 2 * w, row + 2 * w);
      }
    }
  });
  return make_result(std::move(out), "upsample_nearest2x", {x}, [](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{scale(avgpool2x(g), 4.0)};
  });
}

Var avgpool2x(const Var& x) {
  require_rank(x, 4, "avgpool2x");
  const auto& s = x.shape();
  if (s[2] % 2 || s[3] % 2) throw ShapeError("avgpool2x: odd spatial size " + shape_str(s));
  const std::int64_t planes = s[0] * s[1], h = s[2] / 2, w = s[3] / 2;
  Tensor out = Tensor::uninitialized({s[0], s[1], h, w}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = a.data() + p * 4 * h * w;
      T* dst = o.data() + p * h * w;
      for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < w; ++j) {
          const T* q = src + 2 * i * 2 * w + 2 * j;
          dst[i * w + j] = (q[0] + q[1] + q[2 * w] + q[2 * w + 1]) * T(0.25);
        }
    }
  });
  return make_result(std::move(out), "avgpool2x", {x}, [](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{scale(upsample_nearest2x(g), 0.25)};
  });
}

Var global_sum_pool(const Var& x) {
  require_rank(x, 4, "global_sum_pool");
  const auto& s = x.shape();
  const std::int64_t planes = s[0] * s[1], hw = s[2] * s[3];
  Tensor out({s[0], s[1]}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    for (std::int64_t p = 0; p < planes; ++p) {
      T acc = 0;
      for (std::int64_t i = 0; i < hw; ++i) acc += a[p * hw + i];
      o[p] = acc;
    }
  });
  const auto h = s[2], w = s[3];
  return make_result(std::move(out), "global_sum_pool", {x}, [h, w](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{broadcast_spatial(g, h, w)};
  });
}

Var broadcast_spatial(const Var& x, std::int64_t height, std::int64_t width) {
  require_rank(x, 2, "broadcast_spatial");
  const auto& s = x.shape();
  Tensor out({s[0], s[1], height, width}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    for (std::int64_t p = 0; p < s[0] * s[1]; ++p) std::fill_n(o.data() + p * height * width, height * width, a[p]);
  });
  return make_result(std::move(out), "broadcast_spatial", {x}, [](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{global_sum_pool(g)};
  });
}

Var broadcast_batch(const Var& x, std::int64_t batch) {
  if (x.shape()[0] != 1) throw ShapeError("broadcast_batch: leading dim must be 1, got " + shape_str(x.shape()));
  Shape so = x.shape();
  so[0] = batch;
  Tensor out(so, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    for (std::int64_t n = 0; n < batch; ++n) std::copy(a.begin(), a.end(), o.begin() + n * static_cast<std::int64_t>(a.size()));
  });
  return make_result(std::move(out), "broadcast_batch", {x}, [](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{sum_batch(g)};
  });
}

Var sum_batch(const Var& x) {
  Shape so = x.shape();
  const std::int64_t batch = so[0];
  so[0] = 1;
  Tensor out(so, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    const auto per = static_cast<std::int64_t>(o.size());
    for (std::int64_t n = 0; n < batch; ++n)
      for (std::int64_t i = 0; i < per; ++i) o[i] += a[n * per + i];
  });
  return make_result(std::move(out), "sum_batch", {x}, [batch](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{broadcast_batch(g, batch)};
  });
}

// ---------------------------------------------------------------- batchnorm

Var batchnorm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
              const BatchNormOptions& opts) {
  require_rank(x, 4, "batchnorm");
  const auto& s = x.shape();
  const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("batchnorm: affine params must be [" + std::to_string(c) + "]");
  }
  if (!opts.training && !stats.initialized) {
    throw std::logic_error("batchnorm: eval mode before any training step (running stats uninitialized)");
  }
  if (stats.running_mean.empty()) {
    stats.running_mean = Tensor::zeros({c}, x.dtype());
    stats.running_var = Tensor::full({c}, 1.0, x.dtype());
  }
  const double count = static_cast<double>(n * hw);
  if (opts.training && count < 2) throw ShapeError("batchnorm: training needs more than one value per channel");

  // The normalized input is only needed by the backward pass.
  const bool keep = GradMode::enabled() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  Tensor out = Tensor::uninitialized(s, x.dtype());
  Tensor xhat = keep ? Tensor::uninitialized(s, x.dtype()) : Tensor();
  Tensor inv_std({c}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.value().data<T>();
    auto o = out.data<T>();
    T* xh = keep ? xhat.data<T>().data() : nullptr;
    auto is = inv_std.data<T>();
    auto g = gamma.value().data<T>();
    auto b = beta.value().data<T>();
    auto rm = stats.running_mean.data<T>();
    auto rv = stats.running_var.data<T>();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double mu, var;
      if (opts.training) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) acc += row_map(a.data() + (i * c + ch) * hw, hw).template cast<double>().sum();
        mu = acc / count;
        double sq = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          sq += (row_map(a.data() + (i * c + ch) * hw, hw).template cast<double>() - mu).square().sum();
        }
        var = sq / count;
        if (opts.update_stats) {
          rm[ch] = static_cast<T>(opts.momentum * rm[ch] + (1.0 - opts.momentum) * mu);
          rv[ch] = static_cast<T>(opts.momentum * rv[ch] + (1.0 - opts.momentum) * var * count / (count - 1.0));
        }
      } else {
        mu = rm[ch];
        var = rv[ch];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + opts.eps));
      is[ch] = inv;
      const T m = static_cast<T>(mu), gc = g[ch], bc = b[ch];
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t off = (i * c + ch) * hw;
        const T* src = a.data() + off;
        T* dst = o.data() + off;
        if (xh) {
          for (std::int64_t j = 0; j < hw; ++j) {
            const T h = (src[j] - m) * inv;
            xh[off + j] = h;
            dst[j] = gc * h + bc;
          }
        } else {
          for (std::int64_t j = 0; j < hw; ++j) dst[j] = gc * ((src[j] - m) * inv) + bc;
        }
      }
    }
  });
  if (opts.training && opts.update_stats) stats.initialized = true;

  const bool training = opts.training;
  return make_result(
      std::move(out), "batchnorm", {x, gamma, beta},
      [gamma, xhat, inv_std, training, n, c, hw](const Var& gv, const std::vector<bool>& needs) {
        const Tensor& gy = gv.value();
        Tensor gx = Tensor::uninitialized(gy.shape(), gy.dtype());
        Tensor gg({c}, gy.dtype());
        Tensor gb({c}, gy.dtype());
        dispatch(gy.dtype(), [&]<class T>() {
          auto g = gy.data<T>();
          auto xh = xhat.data<T>();
          auto is = inv_std.data<T>();
          auto gam = gamma.value().data<T>();
          auto ox = gx.data<T>();
          const double count = static_cast<double>(n * hw);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            double sg = 0.0, sgx = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
              const std::int64_t off = (i * c + ch) * hw;
              const auto gr = row_map(g.data() + off, hw).template cast<double>();
              sg += gr.sum();
              sgx += (gr * row_map(xh.data() + off, hw).template cast<double>()).sum();
            }
            gb.data<T>()[ch] = static_cast<T>(sg);
            gg.data<T>()[ch] = static_cast<T>(sgx);
            const T k = gam[ch] * is[ch];
            if (training) {
              const T mg = static_cast<T>(sg / count), mgx = static_cast<T>(sgx / count);
              for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t off = (i * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) ox[off + j] = k * (g[off + j] - mg - xh[off + j] * mgx);
              }
            } else {
              for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t off = (i * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) ox[off + j] = k * g[off + j];
              }
            }
          }
        });
        std::vector<Var> r(3);
        if (needs[0]) r[0] = Var(std::move(gx));
        if (needs[1]) r[1] = Var(std::move(gg));
        if (needs[2]) r[2] = Var(std::move(gb));
        return r;
      },
      /*differentiable_backward=*/false);
}

}  // namespace fcbgan
