#include "qve/kernels.hpp"

#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
#define QVE_HAVE_AVX2_TU 1
#include <immintrin.h>
#else
#define QVE_HAVE_AVX2_TU 0
#endif

namespace qve::kernels {

#if QVE_HAVE_AVX2_TU
namespace {

#define QVE_AVX2 __attribute__((target("avx2,fma")))

QVE_AVX2 inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

QVE_AVX2 double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

QVE_AVX2 void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// Four output columns per pass so each load of x feeds four FMAs.
QVE_AVX2 void matmul_nt_avx2(const double* x, std::size_t m, std::size_t k, const double* w,
                             std::size_t n, double* y) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x + i * k;
    double* yi = y + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* w0 = w + (j + 0) * k;
      const double* w1 = w + (j + 1) * k;
      const double* w2 = w + (j + 2) * k;
      const double* w3 = w + (j + 3) * k;
      __m256d a0 = _mm256_setzero_pd();
      __m256d a1 = _mm256_setzero_pd();
      __m256d a2 = _mm256_setzero_pd();
      __m256d a3 = _mm256_setzero_pd();
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        const __m256d xv = _mm256_loadu_pd(xi + p);
        a0 = _mm256_fmadd_pd(xv, _mm256_loadu_pd(w0 + p), a0);
        a1 = _mm256_fmadd_pd(xv, _mm256_loadu_pd(w1 + p), a1);
        a2 = _mm256_fmadd_pd(xv, _mm256_loadu_pd(w2 + p), a2);
        a3 = _mm256_fmadd_pd(xv, _mm256_loadu_pd(w3 + p), a3);
      }
      double s0 = hsum(a0), s1 = hsum(a1), s2 = hsum(a2), s3 = hsum(a3);
      for (; p < k; ++p) {
        s0 += xi[p] * w0[p];
        s1 += xi[p] * w1[p];
        s2 += xi[p] * w2[p];
        s3 += xi[p] * w3[p];
      }
      yi[j] = s0;
      yi[j + 1] = s1;
      yi[j + 2] = s2;
      yi[j + 3] = s3;
    }
    for (; j < n; ++j) yi[j] = dot_avx2(xi, w + j * k, k);
  }
}

QVE_AVX2 void matmul_nn_acc_avx2(const double* g, std::size_t m, std::size_t n,
                                 const double* w, std::size_t k, double* y) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double gij = g[i * n + j];
      if (gij != 0.0) axpy_avx2(gij, w + j * k, y + i * k, k);
    }
  }
}

QVE_AVX2 void matmul_tn_acc_avx2(const double* g, std::size_t m, std::size_t n,
                                 const double* x, std::size_t k, double* d) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double gij = g[i * n + j];
      if (gij != 0.0) axpy_avx2(gij, x + i * k, d + j * k, k);
    }
  }
}

#undef QVE_AVX2

}  // namespace

const KernelTable* avx2_table() {
  static const bool supported =
      __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  static const KernelTable table{"avx2",         dot_avx2,           axpy_avx2,
                                 matmul_nt_avx2, matmul_nn_acc_avx2, matmul_tn_acc_avx2};
  return supported ? &table : nullptr;
}

#else

const KernelTable* avx2_table() { return nullptr; }

#endif

}  // namespace qve::kernels
