#include "fcbgan/substrate/tensor.hpp"

#include <malloc.h>

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

namespace fcbgan {

namespace {
// Activations are large and short-lived; keep freed blocks in the heap
// instead of returning them to the OS after every op.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
}  // namespace

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, DType dtype) : Tensor(uninitialized(std::move(shape), dtype)) {
  fill(0.0);
}

Tensor Tensor::uninitialized(Shape shape, DType dtype) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = dtype;
  t.allocate();
  return t;
}

void Tensor::allocate() {
  if (shape_.empty() || shape_.size() > 4) {
    throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape_.size()));
  }
  for (auto d : shape_) {
    if (d < 1) throw ShapeError("tensor dims must be >= 1, got " + shape_str(shape_));
  }
  const auto n = static_cast<std::size_t>(fcbgan::numel(shape_));
  if (dtype_ == DType::f32) {
    data_ = Buffer<float>(n);
  } else {
    data_ = Buffer<double>(n);
  }
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = uninitialized(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(t.shape()));
  }
  dispatch(dtype, [&]<class T>() {
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

std::int64_t Tensor::numel() const { return shape_.empty() ? 0 : fcbgan::numel(shape_); }

namespace {
void require_rank4(const Shape& s) {
  if (s.size() != 4) throw ShapeError("expected rank-4 tensor, got " + shape_str(s));
}
}  // namespace

std::int64_t Tensor::batch() const { require_rank4(shape_); return shape_[0]; }
std::int64_t Tensor::channels() const { require_rank4(shape_); return shape_[1]; }
std::int64_t Tensor::height() const { require_rank4(shape_); return shape_[2]; }
std::int64_t Tensor::width() const { require_rank4(shape_); return shape_[3]; }

double Tensor::at(std::int64_t flat) const {
  return dispatch(dtype_, [&]<class T>() { return static_cast<double>(data<T>()[flat]); });
}

void Tensor::set(std::int64_t flat, double value) {
  dispatch(dtype_, [&]<class T>() { data<T>()[flat] = static_cast<T>(value); });
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == dtype_) return *this;
  Tensor out(shape_, dtype);
  dispatch(dtype_, [&]<class S>() {
    dispatch(dtype, [&]<class D>() {
      auto src = data<S>();
      auto dst = out.data<D>();
      std::transform(src.begin(), src.end(), dst.begin(), [](S v) { return static_cast<D>(v); });
    });
  });
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (fcbgan::numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  dispatch(dtype_, [&]<class T>() {
    auto d = data<T>();
    std::copy(d.begin(), d.end(), out.begin());
  });
  return out;
}

bool Tensor::all_finite() const {
  // Exponent bits all set means inf or nan; integer ops vectorize where isfinite does not.
  return dispatch(dtype_, [&]<class T>() {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exponent = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
    auto d = data<T>();
    Bits bad = 0;
    for (T x : d) bad |= static_cast<Bits>((std::bit_cast<Bits>(x) & exponent) == exponent);
    return bad == 0;
  });
}

void Tensor::check_finite(const char* where) const {
  if (!all_finite()) {
    throw NonFiniteError(std::string("non-finite value in output of ") + where + " " + shape_str(shape_));
  }
}

bool Tensor::identical(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  return dispatch(dtype_, [&]<class T>() {
    auto a = data<T>();
    auto b = other.data<T>();
    return std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
  });
}

void Tensor::fill(double value) {
  dispatch(dtype_, [&]<class T>() {
    auto d = data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

void Tensor::add_(const Tensor& other) {
  require_same_shape(*this, other, "add_");
  dispatch(dtype_, [&]<class T>() {
    auto a = data<T>();
    auto b = other.data<T>();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  });
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                     dtype_name(b.dtype()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_same_dtype(a, b, op);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace fcbgan
