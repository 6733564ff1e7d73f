#include "qve/kernels.hpp"

namespace qve::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void matmul_nt_scalar(const double* x, std::size_t m, std::size_t k, const double* w,
                      std::size_t n, double* y) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x + i * k;
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = dot_scalar(xi, w + j * k, k);
  }
}

void matmul_nn_acc_scalar(const double* g, std::size_t m, std::size_t n, const double* w,
                          std::size_t k, double* y) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double gij = g[i * n + j];
      if (gij != 0.0) axpy_scalar(gij, w + j * k, y + i * k, k);
    }
  }
}

void matmul_tn_acc_scalar(const double* g, std::size_t m, std::size_t n, const double* x,
                          std::size_t k, double* d) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double gij = g[i * n + j];
      if (gij != 0.0) axpy_scalar(gij, x + i * k, d + j * k, k);
    }
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{"scalar",         dot_scalar,          axpy_scalar,
                                 matmul_nt_scalar, matmul_nn_acc_scalar, matmul_tn_acc_scalar};
  return table;
}

}  // namespace qve::kernels
