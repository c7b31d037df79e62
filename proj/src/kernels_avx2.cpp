#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "octoflow/kernels.hpp"

// AVX2+FMA kernel variants. Compiled only on x86-64 (with -mavx2 -mfma) and
// selected at runtime; semantics match the scalar reference within rounding.
namespace octoflow::kernels {
namespace {

constexpr std::int64_t kKBlock = 256;

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

// 4x8 register tile: 8 accumulators, 2 B vectors, 1 broadcast.
template <int MR>
inline void gemm_tile(const double* a, std::int64_t lda, bool a_transposed,
                      const double* b, std::int64_t ldb, double* c, std::int64_t ldc,
                      std::int64_t i, std::int64_t j, std::int64_t k0, std::int64_t k1,
                      bool first) {
  __m256d acc[MR][2];
  for (int r = 0; r < MR; ++r) {
    if (first) {
      acc[r][0] = _mm256_setzero_pd();
      acc[r][1] = _mm256_setzero_pd();
    } else {
      acc[r][0] = _mm256_loadu_pd(c + (i + r) * ldc + j);
      acc[r][1] = _mm256_loadu_pd(c + (i + r) * ldc + j + 4);
    }
  }
  for (std::int64_t kk = k0; kk < k1; ++kk) {
    __m256d b0 = _mm256_loadu_pd(b + kk * ldb + j);
    __m256d b1 = _mm256_loadu_pd(b + kk * ldb + j + 4);
    for (int r = 0; r < MR; ++r) {
      __m256d ar = _mm256_set1_pd(a_transposed ? a[kk * lda + i + r] : a[(i + r) * lda + kk]);
      acc[r][0] = _mm256_fmadd_pd(ar, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(ar, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    _mm256_storeu_pd(c + (i + r) * ldc + j, acc[r][0]);
    _mm256_storeu_pd(c + (i + r) * ldc + j + 4, acc[r][1]);
  }
}

template <int MR>
inline void gemm_tile4(const double* a, std::int64_t lda, bool a_transposed,
                       const double* b, std::int64_t ldb, double* c, std::int64_t ldc,
                       std::int64_t i, std::int64_t j, std::int64_t k0, std::int64_t k1,
                       bool first) {
  __m256d acc[MR];
  for (int r = 0; r < MR; ++r)
    acc[r] = first ? _mm256_setzero_pd() : _mm256_loadu_pd(c + (i + r) * ldc + j);
  for (std::int64_t kk = k0; kk < k1; ++kk) {
    __m256d b0 = _mm256_loadu_pd(b + kk * ldb + j);
    for (int r = 0; r < MR; ++r) {
      __m256d ar = _mm256_set1_pd(a_transposed ? a[kk * lda + i + r] : a[(i + r) * lda + kk]);
      acc[r] = _mm256_fmadd_pd(ar, b0, acc[r]);
    }
  }
  for (int r = 0; r < MR; ++r) _mm256_storeu_pd(c + (i + r) * ldc + j, acc[r]);
}

void gemm_impl(std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
               std::int64_t lda, bool a_transposed, const double* b, std::int64_t ldb,
               double* c, std::int64_t ldc, bool accumulate) {
  std::int64_t n8 = n - n % 8;
  std::int64_t n4 = n - n % 4;
  for (std::int64_t k0 = 0; k0 < k; k0 += kKBlock) {
    std::int64_t k1 = std::min(k0 + kKBlock, k);
    bool first = (k0 == 0) && !accumulate;
    std::int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
      std::int64_t j = 0;
      for (; j < n8; j += 8) gemm_tile<4>(a, lda, a_transposed, b, ldb, c, ldc, i, j, k0, k1, first);
      for (; j < n4; j += 4) gemm_tile4<4>(a, lda, a_transposed, b, ldb, c, ldc, i, j, k0, k1, first);
      for (; j < n; ++j) {
        for (int r = 0; r < 4; ++r) {
          double s = first ? 0.0 : c[(i + r) * ldc + j];
          for (std::int64_t kk = k0; kk < k1; ++kk)
            s += (a_transposed ? a[kk * lda + i + r] : a[(i + r) * lda + kk]) * b[kk * ldb + j];
          c[(i + r) * ldc + j] = s;
        }
      }
    }
    for (; i < m; ++i) {
      std::int64_t j = 0;
      for (; j < n8; j += 8) gemm_tile<1>(a, lda, a_transposed, b, ldb, c, ldc, i, j, k0, k1, first);
      for (; j < n4; j += 4) gemm_tile4<1>(a, lda, a_transposed, b, ldb, c, ldc, i, j, k0, k1, first);
      for (; j < n; ++j) {
        double s = first ? 0.0 : c[i * ldc + j];
        for (std::int64_t kk = k0; kk < k1; ++kk)
          s += (a_transposed ? a[kk * lda + i] : a[i * lda + kk]) * b[kk * ldb + j];
        c[i * ldc + j] = s;
      }
    }
  }
}

void gemm_avx2(std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
               std::int64_t lda, const double* b, std::int64_t ldb, double* c,
               std::int64_t ldc, bool accumulate) {
  gemm_impl(m, n, k, a, lda, false, b, ldb, c, ldc, accumulate);
}

void gemm_at_avx2(std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
                  std::int64_t lda, const double* b, std::int64_t ldb, double* c,
                  std::int64_t ldc, bool accumulate) {
  gemm_impl(m, n, k, a, lda, true, b, ldb, c, ldc, accumulate);
}

// Row-times-row dot-product form, 2x4 tile over 4-wide k lanes.
void gemm_bt_avx2(std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
                  std::int64_t lda, const double* b, std::int64_t ldb, double* c,
                  std::int64_t ldc, bool accumulate) {
  std::int64_t k4 = k - k % 4;
  std::int64_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* a0 = a + i * lda;
    const double* a1 = a + (i + 1) * lda;
    std::int64_t j = 0;
    for (; j + 4 <= n; j += 4) {
      __m256d acc0[4], acc1[4];
      for (int jr = 0; jr < 4; ++jr) {
        acc0[jr] = _mm256_setzero_pd();
        acc1[jr] = _mm256_setzero_pd();
      }
      for (std::int64_t kk = 0; kk < k4; kk += 4) {
        __m256d av0 = _mm256_loadu_pd(a0 + kk);
        __m256d av1 = _mm256_loadu_pd(a1 + kk);
        for (int jr = 0; jr < 4; ++jr) {
          __m256d bv = _mm256_loadu_pd(b + (j + jr) * ldb + kk);
          acc0[jr] = _mm256_fmadd_pd(av0, bv, acc0[jr]);
          acc1[jr] = _mm256_fmadd_pd(av1, bv, acc1[jr]);
        }
      }
      for (int jr = 0; jr < 4; ++jr) {
        double s0 = hsum(acc0[jr]);
        double s1 = hsum(acc1[jr]);
        const double* brow = b + (j + jr) * ldb;
        for (std::int64_t kk = k4; kk < k; ++kk) {
          s0 += a0[kk] * brow[kk];
          s1 += a1[kk] * brow[kk];
        }
        c[i * ldc + j + jr] = accumulate ? c[i * ldc + j + jr] + s0 : s0;
        c[(i + 1) * ldc + j + jr] = accumulate ? c[(i + 1) * ldc + j + jr] + s1 : s1;
      }
    }
    for (; j < n; ++j) {
      const double* brow = b + j * ldb;
      __m256d v0 = _mm256_setzero_pd(), v1 = _mm256_setzero_pd();
      for (std::int64_t kk = 0; kk < k4; kk += 4) {
        __m256d bv = _mm256_loadu_pd(brow + kk);
        v0 = _mm256_fmadd_pd(_mm256_loadu_pd(a0 + kk), bv, v0);
        v1 = _mm256_fmadd_pd(_mm256_loadu_pd(a1 + kk), bv, v1);
      }
      double s0 = hsum(v0), s1 = hsum(v1);
      for (std::int64_t kk = k4; kk < k; ++kk) {
        s0 += a0[kk] * brow[kk];
        s1 += a1[kk] * brow[kk];
      }
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + s0 : s0;
      c[(i + 1) * ldc + j] = accumulate ? c[(i + 1) * ldc + j] + s1 : s1;
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + i * lda;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * ldb;
      __m256d v = _mm256_setzero_pd();
      for (std::int64_t kk = 0; kk < k4; kk += 4)
        v = _mm256_fmadd_pd(_mm256_loadu_pd(arow + kk), _mm256_loadu_pd(brow + kk), v);
      double s = hsum(v);
      for (std::int64_t kk = k4; kk < k; ++kk) s += arow[kk] * brow[kk];
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
    }
  }
}

void lrelu_fwd_avx2(std::int64_t n, const double* x, double* y, double slope) {
  __m256d zero = _mm256_setzero_pd();
  __m256d sl = _mm256_set1_pd(slope);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_loadu_pd(x + i);
    __m256d neg = _mm256_mul_pd(v, sl);
    __m256d mask = _mm256_cmp_pd(v, zero, _CMP_GE_OQ);
    _mm256_storeu_pd(y + i, _mm256_blendv_pd(neg, v, mask));
  }
  for (; i < n; ++i) y[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
}

void lrelu_bwd_avx2(std::int64_t n, const double* x, const double* dy, double* dx,
                    double slope) {
  __m256d zero = _mm256_setzero_pd();
  __m256d sl = _mm256_set1_pd(slope);
  __m256d one = _mm256_set1_pd(1.0);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_loadu_pd(x + i);
    __m256d mask = _mm256_cmp_pd(v, zero, _CMP_GE_OQ);
    __m256d factor = _mm256_blendv_pd(sl, one, mask);
    __m256d d = _mm256_loadu_pd(dx + i);
    _mm256_storeu_pd(dx + i, _mm256_fmadd_pd(_mm256_loadu_pd(dy + i), factor, d));
  }
  for (; i < n; ++i) dx[i] += dy[i] * (x[i] >= 0.0 ? 1.0 : slope);
}

void axpy_avx2(std::int64_t n, double a, const double* x, double* y) {
  __m256d av = _mm256_set1_pd(a);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d yv = _mm256_loadu_pd(y + i);
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), yv));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void adam_step_avx2(std::int64_t n, double* p, const double* g, double* m, double* v,
                    double lr, double beta1, double beta2, double eps, double bias1,
                    double bias2) {
  __m256d b1 = _mm256_set1_pd(beta1), b1c = _mm256_set1_pd(1.0 - beta1);
  __m256d b2 = _mm256_set1_pd(beta2), b2c = _mm256_set1_pd(1.0 - beta2);
  __m256d lr_v = _mm256_set1_pd(lr), eps_v = _mm256_set1_pd(eps);
  __m256d ib1 = _mm256_set1_pd(1.0 / bias1), ib2 = _mm256_set1_pd(1.0 / bias2);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d gv = _mm256_loadu_pd(g + i);
    __m256d mv = _mm256_fmadd_pd(b1, _mm256_loadu_pd(m + i), _mm256_mul_pd(b1c, gv));
    __m256d vv = _mm256_fmadd_pd(b2, _mm256_loadu_pd(v + i),
                                 _mm256_mul_pd(b2c, _mm256_mul_pd(gv, gv)));
    _mm256_storeu_pd(m + i, mv);
    _mm256_storeu_pd(v + i, vv);
    __m256d mhat = _mm256_mul_pd(mv, ib1);
    __m256d vhat = _mm256_mul_pd(vv, ib2);
    __m256d den = _mm256_add_pd(_mm256_sqrt_pd(vhat), eps_v);
    __m256d upd = _mm256_div_pd(_mm256_mul_pd(lr_v, mhat), den);
    _mm256_storeu_pd(p + i, _mm256_sub_pd(_mm256_loadu_pd(p + i), upd));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    p[i] -= lr * (m[i] * (1.0 / bias1)) / (std::sqrt(v[i] * (1.0 / bias2)) + eps);
  }
}

double abs_sum_diff_avx2(std::int64_t n, const double* a, const double* b) {
  __m256d signmask = _mm256_set1_pd(-0.0);
  __m256d acc = _mm256_setzero_pd();
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    acc = _mm256_add_pd(acc, _mm256_andnot_pd(signmask, d));
  }
  double s = hsum(acc);
  for (; i < n; ++i) s += std::fabs(a[i] - b[i]);
  return s;
}

void sign_diff_scale_avx2(std::int64_t n, const double* a, const double* b, double coeff,
                          double* out) {
  __m256d zero = _mm256_setzero_pd();
  __m256d cp = _mm256_set1_pd(coeff), cn = _mm256_set1_pd(-coeff);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    __m256d pos = _mm256_and_pd(_mm256_cmp_pd(d, zero, _CMP_GT_OQ), cp);
    __m256d neg = _mm256_and_pd(_mm256_cmp_pd(d, zero, _CMP_LT_OQ), cn);
    __m256d o = _mm256_loadu_pd(out + i);
    _mm256_storeu_pd(out + i, _mm256_add_pd(o, _mm256_add_pd(pos, neg)));
  }
  for (; i < n; ++i) {
    double d = a[i] - b[i];
    out[i] += d > 0.0 ? coeff : (d < 0.0 ? -coeff : 0.0);
  }
}

double dot_avx2(std::int64_t n, const double* a, const double* b) {
  __m256d acc = _mm256_setzero_pd();
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
  double s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

const Backend* avx2_backend_impl() {
  static const Backend backend = {
      "avx2",         gemm_avx2,      gemm_at_avx2,        gemm_bt_avx2,
      lrelu_fwd_avx2, lrelu_bwd_avx2, axpy_avx2,           adam_step_avx2,
      abs_sum_diff_avx2, sign_diff_scale_avx2, dot_avx2,
  };
  return &backend;
}

}  // namespace octoflow::kernels
