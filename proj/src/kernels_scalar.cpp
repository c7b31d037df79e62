#include <cmath>
#include <cstdint>
#include <cstring>

#include "octoflow/kernels.hpp"

// Scalar reference kernels. These define the semantics the SIMD variants are
// tested against; keep them straightforward.
namespace octoflow::kernels {
namespace {

constexpr std::int64_t kKBlock = 256;  // keeps the active B panel in L2

void gemm_scalar(std::int64_t m, std::int64_t n, std::int64_t k,
                 const double* a, std::int64_t lda,
                 const double* b, std::int64_t ldb,
                 double* c, std::int64_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::int64_t i = 0; i < m; ++i) std::memset(c + i * ldc, 0, sizeof(double) * n);
  }
  for (std::int64_t k0 = 0; k0 < k; k0 += kKBlock) {
    std::int64_t k1 = std::min(k0 + kKBlock, k);
    for (std::int64_t i = 0; i < m; ++i) {
      double* crow = c + i * ldc;
      for (std::int64_t kk = k0; kk < k1; ++kk) {
        double aik = a[i * lda + kk];
        if (aik == 0.0) continue;
        const double* brow = b + kk * ldb;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  }
}

void gemm_at_scalar(std::int64_t m, std::int64_t n, std::int64_t k,
                    const double* a, std::int64_t lda,
                    const double* b, std::int64_t ldb,
                    double* c, std::int64_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::int64_t i = 0; i < m; ++i) std::memset(c + i * ldc, 0, sizeof(double) * n);
  }
  for (std::int64_t k0 = 0; k0 < k; k0 += kKBlock) {
    std::int64_t k1 = std::min(k0 + kKBlock, k);
    for (std::int64_t i = 0; i < m; ++i) {
      double* crow = c + i * ldc;
      for (std::int64_t kk = k0; kk < k1; ++kk) {
        double aik = a[kk * lda + i];
        if (aik == 0.0) continue;
        const double* brow = b + kk * ldb;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  }
}

void gemm_bt_scalar(std::int64_t m, std::int64_t n, std::int64_t k,
                    const double* a, std::int64_t lda,
                    const double* b, std::int64_t ldb,
                    double* c, std::int64_t ldc, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * lda;
    double* crow = c + i * ldc;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * ldb;
      double s = 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

void lrelu_fwd_scalar(std::int64_t n, const double* x, double* y, double slope) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
}

void lrelu_bwd_scalar(std::int64_t n, const double* x, const double* dy, double* dx,
                      double slope) {
  for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (x[i] >= 0.0 ? 1.0 : slope);
}

void axpy_scalar(std::int64_t n, double a, const double* x, double* y) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void adam_step_scalar(std::int64_t n, double* p, const double* g, double* m, double* v,
                      double lr, double beta1, double beta2, double eps, double bias1,
                      double bias2) {
  for (std::int64_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    double mhat = m[i] / bias1;
    double vhat = v[i] / bias2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

double abs_sum_diff_scalar(std::int64_t n, const double* a, const double* b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += std::fabs(a[i] - b[i]);
  return s;
}

void sign_diff_scale_scalar(std::int64_t n, const double* a, const double* b, double coeff,
                            double* out) {
  for (std::int64_t i = 0; i < n; ++i) {
    double d = a[i] - b[i];
    out[i] += d > 0.0 ? coeff : (d < 0.0 ? -coeff : 0.0);
  }
}

double dot_scalar(std::int64_t n, const double* a, const double* b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

const Backend& scalar_backend() {
  static const Backend backend = {
      "scalar",         gemm_scalar,      gemm_at_scalar,        gemm_bt_scalar,
      lrelu_fwd_scalar, lrelu_bwd_scalar, axpy_scalar,           adam_step_scalar,
      abs_sum_diff_scalar, sign_diff_scale_scalar, dot_scalar,
  };
  return backend;
}

}  // namespace octoflow::kernels
