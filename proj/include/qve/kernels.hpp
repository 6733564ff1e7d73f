#pragma once

// Dense double-precision kernels used by the transformer engine.
//
// Every kernel exists as a portable scalar reference and, on x86-64 hosts
// with AVX2+FMA, as a vectorized variant. The active table is chosen once at
// startup; QVE_SIMD=scalar forces the reference path.

#include <cstddef>
#include <string_view>

namespace qve::kernels {

// All matrices are row-major and densely packed.
struct KernelTable {
  std::string_view name;

  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);

  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);

  // Y[m x n] = X[m x k] * W[n x k]^T   (linear layer forward)
  void (*matmul_nt)(const double* x, std::size_t m, std::size_t k, const double* w,
                    std::size_t n, double* y);

  // Y[m x k] += G[m x n] * W[n x k]    (input gradient of a linear layer)
  void (*matmul_nn_acc)(const double* g, std::size_t m, std::size_t n, const double* w,
                        std::size_t k, double* y);

  // D[n x k] += G[m x n]^T * X[m x k]  (weight gradient of a linear layer)
  void (*matmul_tn_acc)(const double* g, std::size_t m, std::size_t n, const double* x,
                        std::size_t k, double* d);
};

const KernelTable& scalar_table();

// nullptr when the binary or the host lacks AVX2+FMA.
const KernelTable* avx2_table();

// Table selected for this process.
const KernelTable& active();

}  // namespace qve::kernels
