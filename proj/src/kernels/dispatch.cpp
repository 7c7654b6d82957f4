#include <atomic>
#include <cstdlib>
#include <string_view>

#include "thinseg/kernels.hpp"

namespace thinseg::kernels {

namespace {

Isa probe() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Isa::Avx2;
#endif
  return Isa::Scalar;
}

Isa initial() {
  Isa best = probe();
  if (const char* env = std::getenv("THINSEG_ISA"); env != nullptr && std::string_view(env) == "scalar") {
    return Isa::Scalar;
  }
  return best;
}

std::atomic<Isa>& active() {
  static std::atomic<Isa> isa{initial()};
  return isa;
}

bool use_avx2() { return active().load(std::memory_order_relaxed) == Isa::Avx2; }

}  // namespace

Isa detected_isa() {
  static const Isa isa = probe();
  return isa;
}

Isa active_isa() { return active().load(); }

void set_active_isa(Isa isa) { active().store(isa == Isa::Avx2 && detected_isa() == Isa::Avx2 ? isa : Isa::Scalar); }

std::string to_string(Isa isa) { return isa == Isa::Avx2 ? "avx2" : "scalar"; }

void gemm_nn(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc) {
  if (m <= 0 || n <= 0 || k <= 0) return;
  if (use_avx2()) {
    avx2::gemm_nn(m, n, k, a, lda, b, ldb, c, ldc);
  } else {
    scalar::gemm_nn(m, n, k, a, lda, b, ldb, c, ldc);
  }
}

void gemm_nn(int m, int n, int k, const double* a, int lda, const double* b, int ldb, double* c,
                     int ldc) {
  if (m <= 0 || n <= 0 || k <= 0) return;
  scalar::gemm_nn(m, n, k, a, lda, b, ldb, c, ldc);
}

void gemm_nt(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc) {
  if (m <= 0 || n <= 0 || k <= 0) return;
  if (use_avx2()) {
    avx2::gemm_nt(m, n, k, a, lda, b, ldb, c, ldc);
  } else {
    scalar::gemm_nt(m, n, k, a, lda, b, ldb, c, ldc);
  }
}

void gemm_nt(int m, int n, int k, const double* a, int lda, const double* b, int ldb, double* c,
                     int ldc) {
  if (m <= 0 || n <= 0 || k <= 0) return;
  scalar::gemm_nt(m, n, k, a, lda, b, ldb, c, ldc);
}

void sum_sumsq(const float* x, int n, double* sum, double* sumsq) {
  if (use_avx2()) {
    avx2::sum_sumsq(x, n, sum, sumsq);
  } else {
    scalar::sum_sumsq(x, n, sum, sumsq);
  }
}

void sum_sumsq(const double* x, int n, double* sum, double* sumsq) {
  scalar::sum_sumsq(x, n, sum, sumsq);
}

}  // namespace thinseg::kernels
