#include "octoflow/kernels.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

#include "octoflow/threading.hpp"

namespace octoflow::kernels {

#if defined(OCTOFLOW_HAVE_AVX2)
const Backend* avx2_backend_impl();  // defined in kernels_avx2.cpp
#endif

bool avx2_available() {
#if defined(OCTOFLOW_HAVE_AVX2)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Backend* avx2_backend() {
#if defined(OCTOFLOW_HAVE_AVX2)
  if (avx2_available()) return avx2_backend_impl();
#endif
  return nullptr;
}

namespace {

const Backend* pick_default() {
  if (const char* env = std::getenv("OCTOFLOW_KERNELS")) {
    std::string want(env);
    if (want == "scalar") return &scalar_backend();
    if (want == "avx2") {
      const Backend* b = avx2_backend();
      if (!b) throw std::runtime_error("OCTOFLOW_KERNELS=avx2 but AVX2 is unavailable");
      return b;
    }
  }
  const Backend* b = avx2_backend();
  return b ? b : &scalar_backend();
}

const Backend*& active_slot() {
  static const Backend* slot = pick_default();
  return slot;
}

}  // namespace

const Backend& active() { return *active_slot(); }

std::string active_name() { return active().name; }

void select(BackendKind kind) {
  switch (kind) {
    case BackendKind::kAuto: {
      const Backend* b = avx2_backend();
      active_slot() = b ? b : &scalar_backend();
      break;
    }
    case BackendKind::kScalar:
      active_slot() = &scalar_backend();
      break;
    case BackendKind::kAvx2: {
      const Backend* b = avx2_backend();
      if (!b) throw std::runtime_error("AVX2 kernels unavailable on this CPU/build");
      active_slot() = b;
      break;
    }
  }
}

namespace {
// Below this many multiply-adds the dispatch overhead dominates.
constexpr std::int64_t kParallelFlops = 1 << 18;
}  // namespace

void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const double* a, std::int64_t lda,
          const double* b, std::int64_t ldb, double* c, std::int64_t ldc, bool accumulate) {
  const Backend& be = active();
  if (m * n * k < kParallelFlops || ThreadPool::instance().size() == 1) {
    be.gemm(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
    return;
  }
  ThreadPool::instance().parallel_for(m, [&](std::int64_t r0, std::int64_t r1) {
    be.gemm(r1 - r0, n, k, a + r0 * lda, lda, b, ldb, c + r0 * ldc, ldc, accumulate);
  });
}

void gemm_at(std::int64_t m, std::int64_t n, std::int64_t k, const double* a, std::int64_t lda,
             const double* b, std::int64_t ldb, double* c, std::int64_t ldc, bool accumulate) {
  const Backend& be = active();
  if (m * n * k < kParallelFlops || ThreadPool::instance().size() == 1) {
    be.gemm_at(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
    return;
  }
  ThreadPool::instance().parallel_for(m, [&](std::int64_t r0, std::int64_t r1) {
    be.gemm_at(r1 - r0, n, k, a + r0, lda, b, ldb, c + r0 * ldc, ldc, accumulate);
  });
}

void gemm_bt(std::int64_t m, std::int64_t n, std::int64_t k, const double* a, std::int64_t lda,
             const double* b, std::int64_t ldb, double* c, std::int64_t ldc, bool accumulate) {
  const Backend& be = active();
  if (m * n * k < kParallelFlops || ThreadPool::instance().size() == 1) {
    be.gemm_bt(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
    return;
  }
  ThreadPool::instance().parallel_for(m, [&](std::int64_t r0, std::int64_t r1) {
    be.gemm_bt(r1 - r0, n, k, a + r0 * lda, lda, b, ldb, c + r0 * ldc, ldc, accumulate);
  });
}

}  // namespace octoflow::kernels
