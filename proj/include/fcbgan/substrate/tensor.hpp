#pragma once

#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <new>
#include <utility>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fcbgan {

enum class DType { f32, f64 };

const char* dtype_name(DType dt);

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an op receives operands whose shapes or dtypes do not fit.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or Inf shows up in a tensor that must be finite.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Calls `f.template operator()<T>()` with T = float or double.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

/// Allocator handing out 64-byte aligned blocks, so vectorized kernels see
/// the same alignment (and take the same code path) on every call.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
    void* p = std::aligned_alloc(kAlign, bytes == 0 ? kAlign : bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }

  // Value-less construction leaves elements uninitialized; Tensor decides
  // when to zero-fill.
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array of float or double with value semantics.
///
/// Rank is 1..4. Rank-4 tensors follow the [batch, channels, height, width]
/// layout used by every convolutional op.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype);  // zero-filled

  static Tensor zeros(Shape shape, DType dtype = DType::f32) { return Tensor(std::move(shape), dtype); }
  /// Contents unspecified; for outputs that are written in full.
  static Tensor uninitialized(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from(Shape shape, std::span<const double> values, DType dtype = DType::f32);
  static Tensor from(Shape shape, std::initializer_list<double> values, DType dtype = DType::f32);

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const;
  DType dtype() const { return dtype_; }
  bool empty() const { return shape_.empty(); }

  // Rank-4 accessors.
  std::int64_t batch() const;
  std::int64_t channels() const;
  std::int64_t height() const;
  std::int64_t width() const;

  template <class T>
  std::span<T> data() {
    return std::span<T>(storage<T>());
  }
  template <class T>
  std::span<const T> data() const {
    return std::span<const T>(storage<T>());
  }

  /// Element read/write through double, for tests and small utilities.
  double at(std::int64_t flat) const;
  void set(std::int64_t flat, double value);

  Tensor to(DType dtype) const;
  Tensor reshaped(Shape shape) const;
  std::vector<double> to_vector() const;

  bool all_finite() const;
  /// Throws NonFiniteError naming `where` if any entry is NaN or Inf.
  void check_finite(const char* where) const;

  /// Bitwise equality of shape, dtype and payload.
  bool identical(const Tensor& other) const;

  void fill(double value);
  /// this += other (same shape and dtype).
  void add_(const Tensor& other);

 private:
  void allocate();
  template <class T>
  Buffer<T>& storage() {
    auto* v = std::get_if<Buffer<T>>(&data_);
    if (!v) throw ShapeError(std::string("tensor holds ") + dtype_name(dtype_));
    return *v;
  }
  template <class T>
  const Buffer<T>& storage() const {
    auto* v = std::get_if<Buffer<T>>(&data_);
    if (!v) throw ShapeError(std::string("tensor holds ") + dtype_name(dtype_));
    return *v;
  }

  Shape shape_;
  DType dtype_ = DType::f32;
  std::variant<Buffer<float>, Buffer<double>> data_;
};

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op);
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace fcbgan
