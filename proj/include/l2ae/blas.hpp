#pragma once

#include <cblas.h>

#include <Eigen/Core>
#include <cstddef>
#include <type_traits>

namespace l2ae::blas {

namespace detail {

template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using ConstView = Eigen::Map<const RowMajor<T>, 0, Eigen::OuterStride<>>;

template <class T>
using View = Eigen::Map<RowMajor<T>, 0, Eigen::OuterStride<>>;

template <class T>
void eigen_gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
                std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  using Idx = Eigen::Index;
  const ConstView<T> av(a, trans_a ? Idx(k) : Idx(m), trans_a ? Idx(m) : Idx(k), Eigen::OuterStride<>(Idx(lda)));
  const ConstView<T> bv(b, trans_b ? Idx(n) : Idx(k), trans_b ? Idx(k) : Idx(n), Eigen::OuterStride<>(Idx(ldb)));
  View<T> cv(c, Idx(m), Idx(n), Eigen::OuterStride<>(Idx(ldc)));
  if (beta == T(0))
    cv.setZero();
  else if (beta != T(1))
    cv *= beta;
  if (k == 0) return;
  if (trans_a && trans_b)
    cv.noalias() += alpha * av.transpose() * bv.transpose();
  else if (trans_a)
    cv.noalias() += alpha * av.transpose() * bv;
  else if (trans_b)
    cv.noalias() += alpha * av * bv.transpose();
  else
    cv.noalias() += alpha * av * bv;
}

}  // namespace detail

/// Row-major C = alpha * op(A) * op(B) + beta * C.
///
/// Single precision goes to OpenBLAS sgemm. Double precision goes to Eigen:
/// the dgemm kernel OpenBLAS 0.3.20 selects on Cooper Lake class CPUs returns
/// wrong products once M·N is large (e.g. 500×2000 with K=2).
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if (m == 0 || n == 0) return;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
  } else {
    detail::eigen_gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

}  // namespace l2ae::blas
