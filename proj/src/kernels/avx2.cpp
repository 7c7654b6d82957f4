// Compiled with -mavx2 -mfma; only reached through dispatch when the CPU has both.

#include <immintrin.h>

#include <algorithm>

#include "thinseg/kernels.hpp"

namespace thinseg::kernels::avx2 {

namespace {

constexpr int kBlockK = 256;

// C[R x 8V] += A[R x k] * B[k x 8V]
template <int R, int V>
inline void nn_tile(int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc) {
  __m256 acc[R][V];
  for (int r = 0; r < R; ++r) {
    for (int v = 0; v < V; ++v) acc[r][v] = _mm256_setzero_ps();
  }
  for (int p = 0; p < k; ++p) {
    __m256 bv[V];
    for (int v = 0; v < V; ++v) bv[v] = _mm256_loadu_ps(b + static_cast<long>(p) * ldb + 8 * v);
    for (int r = 0; r < R; ++r) {
      const __m256 av = _mm256_broadcast_ss(a + static_cast<long>(r) * lda + p);
      for (int v = 0; v < V; ++v) acc[r][v] = _mm256_fmadd_ps(av, bv[v], acc[r][v]);
    }
  }
  for (int r = 0; r < R; ++r) {
    for (int v = 0; v < V; ++v) {
      float* dst = c + static_cast<long>(r) * ldc + 8 * v;
      _mm256_storeu_ps(dst, _mm256_add_ps(_mm256_loadu_ps(dst), acc[r][v]));
    }
  }
}

template <int V>
inline void nn_rows(int m, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc) {
  int i = 0;
  for (; i + 6 <= m; i += 6) {
    nn_tile<6, V>(k, a + static_cast<long>(i) * lda, lda, b, ldb, c + static_cast<long>(i) * ldc, ldc);
  }
  const float* ai = a + static_cast<long>(i) * lda;
  float* ci = c + static_cast<long>(i) * ldc;
  switch (m - i) {
    case 5: nn_tile<5, V>(k, ai, lda, b, ldb, ci, ldc); break;
    case 4: nn_tile<4, V>(k, ai, lda, b, ldb, ci, ldc); break;
    case 3: nn_tile<3, V>(k, ai, lda, b, ldb, ci, ldc); break;
    case 2: nn_tile<2, V>(k, ai, lda, b, ldb, ci, ldc); break;
    case 1: nn_tile<1, V>(k, ai, lda, b, ldb, ci, ldc); break;
    default: break;
  }
}

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

// C[RI x RJ] += A[RI x k] * B[RJ x k]^T
template <int RI, int RJ>
inline void nt_tile(int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc) {
  __m256 acc[RI][RJ];
  for (int i = 0; i < RI; ++i) {
    for (int j = 0; j < RJ; ++j) acc[i][j] = _mm256_setzero_ps();
  }
  int p = 0;
  for (; p + 8 <= k; p += 8) {
    __m256 bv[RJ];
    for (int j = 0; j < RJ; ++j) bv[j] = _mm256_loadu_ps(b + static_cast<long>(j) * ldb + p);
    for (int i = 0; i < RI; ++i) {
      const __m256 av = _mm256_loadu_ps(a + static_cast<long>(i) * lda + p);
      for (int j = 0; j < RJ; ++j) acc[i][j] = _mm256_fmadd_ps(av, bv[j], acc[i][j]);
    }
  }
  for (int i = 0; i < RI; ++i) {
    for (int j = 0; j < RJ; ++j) {
      float s = hsum(acc[i][j]);
      for (int q = p; q < k; ++q) s += a[static_cast<long>(i) * lda + q] * b[static_cast<long>(j) * ldb + q];
      c[static_cast<long>(i) * ldc + j] += s;
    }
  }
}

template <int RJ>
inline void nt_rows(int m, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc) {
  int i = 0;
  for (; i + 2 <= m; i += 2) {
    nt_tile<2, RJ>(k, a + static_cast<long>(i) * lda, lda, b, ldb, c + static_cast<long>(i) * ldc, ldc);
  }
  if (i < m) nt_tile<1, RJ>(k, a + static_cast<long>(i) * lda, lda, b, ldb, c + static_cast<long>(i) * ldc, ldc);
}

}  // namespace

void gemm_nn(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc) {
  for (int p0 = 0; p0 < k; p0 += kBlockK) {
    const int kb = std::min(kBlockK, k - p0);
    const float* ab = a + p0;
    const float* bb = b + static_cast<long>(p0) * ldb;
    int j = 0;
    for (; j + 16 <= n; j += 16) nn_rows<2>(m, kb, ab, lda, bb + j, ldb, c + j, ldc);
    for (; j + 8 <= n; j += 8) nn_rows<1>(m, kb, ab, lda, bb + j, ldb, c + j, ldc);
    if (j < n) {
      for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<long>(i) * ldc;
        for (int p = 0; p < kb; ++p) {
          const float av = ab[static_cast<long>(i) * lda + p];
          const float* brow = bb + static_cast<long>(p) * ldb;
          for (int jj = j; jj < n; ++jj) crow[jj] += av * brow[jj];
        }
      }
    }
  }
}

void gemm_nt(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc) {
  // B rows stay hot in L1 while every A row passes over them.
  int j = 0;
  for (; j + 4 <= n; j += 4) nt_rows<4>(m, k, a, lda, b + static_cast<long>(j) * ldb, ldb, c + j, ldc);
  for (; j < n; ++j) nt_rows<1>(m, k, a, lda, b + static_cast<long>(j) * ldb, ldb, c + j, ldc);
}

void sum_sumsq(const float* x, int n, double* sum, double* sumsq) {
  __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
  __m256d q0 = _mm256_setzero_pd(), q1 = _mm256_setzero_pd();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
    __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
    s0 = _mm256_add_pd(s0, lo);
    s1 = _mm256_add_pd(s1, hi);
    q0 = _mm256_fmadd_pd(lo, lo, q0);
    q1 = _mm256_fmadd_pd(hi, hi, q1);
  }
  alignas(32) double buf[4];
  _mm256_store_pd(buf, _mm256_add_pd(s0, s1));
  double s = buf[0] + buf[1] + buf[2] + buf[3];
  _mm256_store_pd(buf, _mm256_add_pd(q0, q1));
  double q = buf[0] + buf[1] + buf[2] + buf[3];
  for (; i < n; ++i) {
    s += x[i];
    q += static_cast<double>(x[i]) * x[i];
  }
  *sum = s;
  *sumsq = q;
}

}  // namespace thinseg::kernels::avx2
