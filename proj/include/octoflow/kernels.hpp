#pragma once

#include <cstdint>
#include <string>

// Double-precision arithmetic kernels behind the training and inference hot
// loops. A scalar reference implementation is always available; an AVX2+FMA
// variant is selected at runtime on x86-64 when the CPU supports it. Both
// variants implement the same table and are equivalence-tested against each
// other. All matrices are dense row-major.
namespace octoflow::kernels {

struct Backend {
  const char* name;

  // C[M x N] = (accumulate ? C : 0) + A[M x K] * B[K x N]
  void (*gemm)(std::int64_t m, std::int64_t n, std::int64_t k,
               const double* a, std::int64_t lda,
               const double* b, std::int64_t ldb,
               double* c, std::int64_t ldc, bool accumulate);

  // C[M x N] = (accumulate ? C : 0) + A^T * B with A stored [K x M]
  void (*gemm_at)(std::int64_t m, std::int64_t n, std::int64_t k,
                  const double* a, std::int64_t lda,
                  const double* b, std::int64_t ldb,
                  double* c, std::int64_t ldc, bool accumulate);

  // C[M x N] = (accumulate ? C : 0) + A * B^T with B stored [N x K]
  void (*gemm_bt)(std::int64_t m, std::int64_t n, std::int64_t k,
                  const double* a, std::int64_t lda,
                  const double* b, std::int64_t ldb,
                  double* c, std::int64_t ldc, bool accumulate);

  // y[i] = x[i] >= 0 ? x[i] : slope * x[i]
  void (*lrelu_fwd)(std::int64_t n, const double* x, double* y, double slope);

  // dx[i] += dy[i] * (x[i] >= 0 ? 1 : slope)
  void (*lrelu_bwd)(std::int64_t n, const double* x, const double* dy,
                    double* dx, double slope);

  // y += a * x
  void (*axpy)(std::int64_t n, double a, const double* x, double* y);

  // ADAM with precomputed bias corrections bias1 = 1-beta1^t, bias2 = 1-beta2^t
  void (*adam_step)(std::int64_t n, double* p, const double* g, double* m,
                    double* v, double lr, double beta1, double beta2,
                    double eps, double bias1, double bias2);

  // sum_i |a[i] - b[i]|
  double (*abs_sum_diff)(std::int64_t n, const double* a, const double* b);

  // out[i] += coeff * sign(a[i] - b[i]), sign(0) = 0
  void (*sign_diff_scale)(std::int64_t n, const double* a, const double* b,
                          double coeff, double* out);

  double (*dot)(std::int64_t n, const double* a, const double* b);
};

enum class BackendKind { kAuto, kScalar, kAvx2 };

const Backend& scalar_backend();
bool avx2_available();
const Backend* avx2_backend();  // nullptr when not compiled in / unsupported

// Active backend. Defaults to the best available; overridable via select()
// or the OCTOFLOW_KERNELS environment variable (values: scalar, avx2).
const Backend& active();
void select(BackendKind kind);
std::string active_name();

// Threaded front door used by the autodiff ops: partitions output rows over
// the global thread pool and forwards to the active backend. Partitioning is
// a pure function of the shape and the pool size, so results are reproducible
// for a fixed thread count.
void gemm(std::int64_t m, std::int64_t n, std::int64_t k,
          const double* a, std::int64_t lda,
          const double* b, std::int64_t ldb,
          double* c, std::int64_t ldc, bool accumulate);
void gemm_at(std::int64_t m, std::int64_t n, std::int64_t k,
             const double* a, std::int64_t lda,
             const double* b, std::int64_t ldb,
             double* c, std::int64_t ldc, bool accumulate);
void gemm_bt(std::int64_t m, std::int64_t n, std::int64_t k,
             const double* a, std::int64_t lda,
             const double* b, std::int64_t ldb,
             double* c, std::int64_t ldc, bool accumulate);

}  // namespace octoflow::kernels
