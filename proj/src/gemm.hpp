#pragma once

// Thin row-major wrapper over the CBLAS GEMM pair so float and double code
// paths share one call site.

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace mixmask {

// C[M x N] = alpha * op(A) * op(B) + beta * C, row-major. Leading dimensions
// are the natural packed ones: op(A) is M x K, op(B) is K x N.
// BLAS threading is pinned to one thread: multi-threaded GEMM reorders
// reductions and would break bit-exact reproducibility across worker counts.
template <typename T>
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha,
                 const T* a, const T* b, T beta, T* c) {
  [[maybe_unused]] static const bool pinned = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  int lda = trans_a ? m : k;
  int ldb = trans_b ? k : n;
  if constexpr (sizeof(T) == sizeof(float)) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k,
                static_cast<float>(alpha), reinterpret_cast<const float*>(a), lda,
                reinterpret_cast<const float*>(b), ldb, static_cast<float>(beta),
                reinterpret_cast<float*>(c), n);
  } else {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k,
                static_cast<double>(alpha), reinterpret_cast<const double*>(a), lda,
                reinterpret_cast<const double*>(b), ldb, static_cast<double>(beta),
                reinterpret_cast<double*>(c), n);
  }
}

}  // namespace mixmask
