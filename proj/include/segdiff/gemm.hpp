#pragma once

#include <Eigen/Core>

namespace segdiff {

// Row-major dense products, all shapes given for the non-transposed view.
// Eigen packs its operands before multiplying, so results do not depend on
// input pointer alignment; per-element accumulation order is fixed, which the
// reproducibility contract relies on.

template <class T>
using EigenRowMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[M,N] = or += A[M,K] * B[K,N]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  Eigen::Map<const EigenRowMat<T>> ma(a, m, k), mb(b, k, n);
  Eigen::Map<EigenRowMat<T>> mc(c, m, n);
  if (accumulate) mc.noalias() += ma * mb;
  else mc.noalias() = ma * mb;
}

/// C[M,N] = or += A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  Eigen::Map<const EigenRowMat<T>> ma(a, m, k), mb(b, n, k);
  Eigen::Map<EigenRowMat<T>> mc(c, m, n);
  if (accumulate) mc.noalias() += ma * mb.transpose();
  else mc.noalias() = ma * mb.transpose();
}

/// C[M,N] = or += A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  Eigen::Map<const EigenRowMat<T>> ma(a, k, m), mb(b, k, n);
  Eigen::Map<EigenRowMat<T>> mc(c, m, n);
  if (accumulate) mc.noalias() += ma.transpose() * mb;
  else mc.noalias() = ma.transpose() * mb;
}

}  // namespace segdiff
