#include "thinseg/kernels.hpp"

namespace thinseg::kernels::scalar {

template <class T>
void gemm_nn(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<long>(i) * ldc;
    for (int p = 0; p < k; ++p) {
      const T av = a[static_cast<long>(i) * lda + p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<long>(p) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void gemm_nt(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<long>(i) * lda;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<long>(j) * ldb;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[static_cast<long>(i) * ldc + j] += acc;
    }
  }
}

template <class T>
void sum_sumsq(const T* x, int n, double* sum, double* sumsq) {
  double s = 0.0, q = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = x[i];
    s += v;
    q += v * v;
  }
  *sum = s;
  *sumsq = q;
}

template void gemm_nn<float>(int, int, int, const float*, int, const float*, int, float*, int);
template void gemm_nn<double>(int, int, int, const double*, int, const double*, int, double*, int);
template void gemm_nt<float>(int, int, int, const float*, int, const float*, int, float*, int);
template void gemm_nt<double>(int, int, int, const double*, int, const double*, int, double*, int);
template void sum_sumsq<float>(const float*, int, double*, double*);
template void sum_sumsq<double>(const double*, int, double*, double*);

}  // namespace thinseg::kernels::scalar
