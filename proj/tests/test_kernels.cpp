#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "octoflow/kernels.hpp"
#include "octoflow/rng.hpp"
#include "octoflow/threading.hpp"

using namespace octoflow;

namespace {

std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = uniform(rng, -scale, scale);
  return v;
}

// Textbook triple loop against which both backends are checked.
void naive_gemm(std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
                std::int64_t lda, const double* b, std::int64_t ldb, double* c,
                std::int64_t ldc, bool accumulate, bool at, bool bt) {
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double sum = accumulate ? c[i * ldc + j] : 0.0;
      for (std::int64_t p = 0; p < k; ++p) {
        double av = at ? a[p * lda + i] : a[i * lda + p];
        double bv = bt ? b[j * ldb + p] : b[p * ldb + j];
        sum += av * bv;
      }
      c[i * ldc + j] = sum;
    }
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

void check_gemm_family(const kernels::Backend& be, double tol) {
  std::mt19937_64 rng(11);
  const std::int64_t shapes[][3] = {{1, 1, 1}, {3, 5, 7},  {8, 8, 8},
                                    {17, 4, 9}, {5, 33, 2}, {24, 24, 24}};
  for (const auto& s : shapes) {
    std::int64_t m = s[0], n = s[1], k = s[2];
    for (bool accumulate : {false, true}) {
      std::vector<double> b = random_vec(rng, static_cast<std::size_t>(k * n));
      std::vector<double> c0 = random_vec(rng, static_cast<std::size_t>(m * n));

      std::vector<double> a = random_vec(rng, static_cast<std::size_t>(m * k));
      std::vector<double> got = c0, want = c0;
      be.gemm(m, n, k, a.data(), k, b.data(), n, got.data(), n, accumulate);
      naive_gemm(m, n, k, a.data(), k, b.data(), n, want.data(), n, accumulate, false,
                 false);
      CHECK(max_abs_diff(got, want) < tol);

      std::vector<double> a_t = random_vec(rng, static_cast<std::size_t>(k * m));
      got = c0;
      want = c0;
      be.gemm_at(m, n, k, a_t.data(), m, b.data(), n, got.data(), n, accumulate);
      naive_gemm(m, n, k, a_t.data(), m, b.data(), n, want.data(), n, accumulate, true,
                 false);
      CHECK(max_abs_diff(got, want) < tol);

      std::vector<double> b_t = random_vec(rng, static_cast<std::size_t>(n * k));
      got = c0;
      want = c0;
      be.gemm_bt(m, n, k, a.data(), k, b_t.data(), k, got.data(), n, accumulate);
      naive_gemm(m, n, k, a.data(), k, b_t.data(), k, want.data(), n, accumulate, false,
                 true);
      CHECK(max_abs_diff(got, want) < tol);
    }
  }
}

}  // namespace

TEST_CASE("scalar gemm family matches the naive triple loop") {
  check_gemm_family(kernels::scalar_backend(), 1e-12);
}

TEST_CASE("avx2 gemm family matches the naive triple loop") {
  if (!kernels::avx2_available()) return;
  check_gemm_family(*kernels::avx2_backend(), 1e-12);
}

TEST_CASE("scalar and avx2 backends agree on every table entry") {
  if (!kernels::avx2_available()) return;
  const kernels::Backend& sc = kernels::scalar_backend();
  const kernels::Backend& vx = *kernels::avx2_backend();
  std::mt19937_64 rng(23);

  std::int64_t m = 13, n = 21, k = 17;
  std::vector<double> a = random_vec(rng, static_cast<std::size_t>(m * k));
  std::vector<double> b = random_vec(rng, static_cast<std::size_t>(k * n));
  std::vector<double> c1(static_cast<std::size_t>(m * n), 0.5);
  std::vector<double> c2 = c1;
  sc.gemm(m, n, k, a.data(), k, b.data(), n, c1.data(), n, true);
  vx.gemm(m, n, k, a.data(), k, b.data(), n, c2.data(), n, true);
  CHECK(max_abs_diff(c1, c2) < 1e-13);

  std::size_t len = 1001;  // odd length exercises the vector tail
  std::vector<double> x = random_vec(rng, len), y = random_vec(rng, len);
  std::vector<double> o1(len), o2(len);
  sc.lrelu_fwd(static_cast<std::int64_t>(len), x.data(), o1.data(), 0.01);
  vx.lrelu_fwd(static_cast<std::int64_t>(len), x.data(), o2.data(), 0.01);
  CHECK(max_abs_diff(o1, o2) == 0.0);

  std::vector<double> dx1 = random_vec(rng, len), dx2 = dx1;
  sc.lrelu_bwd(static_cast<std::int64_t>(len), x.data(), y.data(), dx1.data(), 0.01);
  vx.lrelu_bwd(static_cast<std::int64_t>(len), x.data(), y.data(), dx2.data(), 0.01);
  CHECK(max_abs_diff(dx1, dx2) < 1e-15);

  std::vector<double> y1 = y, y2 = y;
  sc.axpy(static_cast<std::int64_t>(len), 0.37, x.data(), y1.data());
  vx.axpy(static_cast<std::int64_t>(len), 0.37, x.data(), y2.data());
  CHECK(max_abs_diff(y1, y2) < 1e-15);

  CHECK(std::abs(sc.abs_sum_diff(static_cast<std::int64_t>(len), x.data(), y.data()) -
                 vx.abs_sum_diff(static_cast<std::int64_t>(len), x.data(), y.data())) <
        1e-10);
  CHECK(std::abs(sc.dot(static_cast<std::int64_t>(len), x.data(), y.data()) -
                 vx.dot(static_cast<std::int64_t>(len), x.data(), y.data())) < 1e-10);

  std::vector<double> s1(len, 0.25), s2(len, 0.25);
  sc.sign_diff_scale(static_cast<std::int64_t>(len), x.data(), y.data(), 0.7, s1.data());
  vx.sign_diff_scale(static_cast<std::int64_t>(len), x.data(), y.data(), 0.7, s2.data());
  CHECK(max_abs_diff(s1, s2) == 0.0);

  std::vector<double> p1 = random_vec(rng, len), p2 = p1;
  std::vector<double> g = random_vec(rng, len);
  std::vector<double> m1(len, 0.01), m2 = m1, v1(len, 0.02), v2 = v1;
  sc.adam_step(static_cast<std::int64_t>(len), p1.data(), g.data(), m1.data(), v1.data(),
               1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001999);
  vx.adam_step(static_cast<std::int64_t>(len), p2.data(), g.data(), m2.data(), v2.data(),
               1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001999);
  CHECK(max_abs_diff(p1, p2) < 1e-13);
  CHECK(max_abs_diff(m1, m2) < 1e-15);
  CHECK(max_abs_diff(v1, v2) < 1e-15);
}

TEST_CASE("scalar lrelu, adam and reductions match direct formulas") {
  const kernels::Backend& be = kernels::scalar_backend();
  std::mt19937_64 rng(31);
  std::size_t len = 257;
  std::vector<double> x = random_vec(rng, len), dy = random_vec(rng, len);

  std::vector<double> y(len);
  be.lrelu_fwd(static_cast<std::int64_t>(len), x.data(), y.data(), 0.05);
  for (std::size_t i = 0; i < len; ++i)
    CHECK(y[i] == (x[i] >= 0.0 ? x[i] : 0.05 * x[i]));

  std::vector<double> dx(len, 1.0);
  be.lrelu_bwd(static_cast<std::int64_t>(len), x.data(), dy.data(), dx.data(), 0.05);
  for (std::size_t i = 0; i < len; ++i)
    CHECK(dx[i] == doctest::Approx(1.0 + dy[i] * (x[i] >= 0.0 ? 1.0 : 0.05)).epsilon(1e-14));

  double want_abs = 0.0, want_dot = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    want_abs += std::abs(x[i] - dy[i]);
    want_dot += x[i] * dy[i];
  }
  CHECK(be.abs_sum_diff(static_cast<std::int64_t>(len), x.data(), dy.data()) ==
        doctest::Approx(want_abs).epsilon(1e-12));
  CHECK(be.dot(static_cast<std::int64_t>(len), x.data(), dy.data()) ==
        doctest::Approx(want_dot).epsilon(1e-12));

  // One ADAM step against the expanded update formula.
  std::vector<double> p = x, m(len, 0.0), v(len, 0.0);
  double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  be.adam_step(static_cast<std::int64_t>(len), p.data(), dy.data(), m.data(), v.data(),
               lr, b1, b2, eps, 1.0 - b1, 1.0 - b2);
  for (std::size_t i = 0; i < len; ++i) {
    double mi = (1.0 - b1) * dy[i];
    double vi = (1.0 - b2) * dy[i] * dy[i];
    double want = x[i] - lr * (mi / (1.0 - b1)) / (std::sqrt(vi / (1.0 - b2)) + eps);
    CHECK(p[i] == doctest::Approx(want).epsilon(1e-12));
    CHECK(m[i] == doctest::Approx(mi).epsilon(1e-14));
    CHECK(v[i] == doctest::Approx(vi).epsilon(1e-14));
  }
}

TEST_CASE("threaded gemm equals single-threaded bit for bit") {
  std::mt19937_64 rng(47);
  std::int64_t m = 37, n = 19, k = 23;
  std::vector<double> a = random_vec(rng, static_cast<std::size_t>(m * k));
  std::vector<double> b = random_vec(rng, static_cast<std::size_t>(k * n));
  std::vector<double> c1(static_cast<std::size_t>(m * n), 1.0), c2 = c1, c3 = c1;

  ThreadPool::instance().resize(1);
  kernels::gemm(m, n, k, a.data(), k, b.data(), n, c1.data(), n, true);
  ThreadPool::instance().resize(3);
  kernels::gemm(m, n, k, a.data(), k, b.data(), n, c2.data(), n, true);
  ThreadPool::instance().resize(4);
  kernels::gemm(m, n, k, a.data(), k, b.data(), n, c3.data(), n, true);
  ThreadPool::instance().resize(1);

  CHECK(max_abs_diff(c1, c2) == 0.0);
  CHECK(max_abs_diff(c1, c3) == 0.0);
}

TEST_CASE("backend selection honours explicit requests") {
  kernels::select(kernels::BackendKind::kScalar);
  CHECK(kernels::active_name() == "scalar");
  if (kernels::avx2_available()) {
    kernels::select(kernels::BackendKind::kAvx2);
    CHECK(kernels::active_name() == "avx2");
  }
  kernels::select(kernels::BackendKind::kAuto);
  CHECK(kernels::active_name() == (kernels::avx2_available() ? "avx2" : "scalar"));
}
