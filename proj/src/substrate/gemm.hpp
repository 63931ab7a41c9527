#pragma once

#include <cstdint>

#include <Eigen/Core>

namespace fcbgan::detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[m,n] (+)= op(A) op(B) on row-major buffers with explicit row strides.
/// op(A) is [m,k]; A is stored as [k,m] when trans_a. Likewise B is stored
/// as [n,k] when trans_b.
template <class T>
void gemm_ld(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
             std::int64_t lda, const T* b, std::int64_t ldb, T* c, std::int64_t ldc, bool accumulate) {
  using Stride = Eigen::OuterStride<>;
  using Map = Eigen::Map<const RowMat<T>, 0, Stride>;
  Eigen::Map<RowMat<T>, 0, Stride> cm(c, m, n, Stride(ldc));
  Map am(a, trans_a ? k : m, trans_a ? m : k, Stride(lda));
  Map bm(b, trans_b ? n : k, trans_b ? k : n, Stride(ldb));
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) run(am, bm);
  if (!trans_a && trans_b) run(am, bm.transpose());
  if (trans_a && !trans_b) run(am.transpose(), bm);
  if (trans_a && trans_b) run(am.transpose(), bm.transpose());
}

/// Densely packed variant of gemm_ld.
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  gemm_ld(trans_a, trans_b, m, n, k, a, trans_a ? m : k, b, trans_b ? k : n, c, n, accumulate);
}

}  // namespace fcbgan::detail
