#pragma once

// Dense inner loops of the network. Every kernel has a scalar reference
// implementation; float kernels also have an AVX2/FMA variant chosen at run
// time when the CPU supports it. Double precision always takes the scalar
// path (it is only used for gradient checks).

#include <string>

namespace thinseg::kernels {

enum class Isa { Scalar, Avx2 };

/// Best instruction set available on this CPU.
Isa detected_isa();
/// Instruction set used by the dispatching entry points.
Isa active_isa();
/// Forces a dispatch target; requesting an unsupported ISA falls back to Scalar.
/// The THINSEG_ISA environment variable ("scalar" or "avx2") sets the initial value.
void set_active_isa(Isa isa);
std::string to_string(Isa isa);

// Row-major, leading dimensions in elements. All kernels accumulate into C.

/// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc);
void gemm_nn(int m, int n, int k, const double* a, int lda, const double* b, int ldb, double* c, int ldc);

/// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc);
void gemm_nt(int m, int n, int k, const double* a, int lda, const double* b, int ldb, double* c, int ldc);

/// Returns (sum x, sum x^2) accumulated in double.
void sum_sumsq(const float* x, int n, double* sum, double* sumsq);
void sum_sumsq(const double* x, int n, double* sum, double* sumsq);

namespace scalar {
template <class T>
void gemm_nn(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc);
template <class T>
void gemm_nt(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc);
template <class T>
void sum_sumsq(const T* x, int n, double* sum, double* sumsq);
}  // namespace scalar

namespace avx2 {
void gemm_nn(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc);
void gemm_nt(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc);
void sum_sumsq(const float* x, int n, double* sum, double* sumsq);
}  // namespace avx2

}  // namespace thinseg::kernels
