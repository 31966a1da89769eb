#include <immintrin.h>

#include "kernels_impl.hpp"

namespace msdm::kernels::detail {

namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

// 4 rows x 8 columns register block: 8 accumulators, two B loads and four
// A broadcasts per k step.
inline void block_4x8(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                      bool accumulate) {
  __m256d c00, c01, c10, c11, c20, c21, c30, c31;
  if (accumulate) {
    c00 = _mm256_loadu_pd(c);
    c01 = _mm256_loadu_pd(c + 4);
    c10 = _mm256_loadu_pd(c + n);
    c11 = _mm256_loadu_pd(c + n + 4);
    c20 = _mm256_loadu_pd(c + 2 * n);
    c21 = _mm256_loadu_pd(c + 2 * n + 4);
    c30 = _mm256_loadu_pd(c + 3 * n);
    c31 = _mm256_loadu_pd(c + 3 * n + 4);
  } else {
    c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_pd();
  }
  const double* a0 = a;
  const double* a1 = a + k;
  const double* a2 = a + 2 * k;
  const double* a3 = a + 3 * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    const __m256d b0 = _mm256_loadu_pd(brow);
    const __m256d b1 = _mm256_loadu_pd(brow + 4);
    __m256d av = _mm256_broadcast_sd(a0 + p);
    c00 = _mm256_fmadd_pd(av, b0, c00);
    c01 = _mm256_fmadd_pd(av, b1, c01);
    av = _mm256_broadcast_sd(a1 + p);
    c10 = _mm256_fmadd_pd(av, b0, c10);
    c11 = _mm256_fmadd_pd(av, b1, c11);
    av = _mm256_broadcast_sd(a2 + p);
    c20 = _mm256_fmadd_pd(av, b0, c20);
    c21 = _mm256_fmadd_pd(av, b1, c21);
    av = _mm256_broadcast_sd(a3 + p);
    c30 = _mm256_fmadd_pd(av, b0, c30);
    c31 = _mm256_fmadd_pd(av, b1, c31);
  }
  _mm256_storeu_pd(c, c00);
  _mm256_storeu_pd(c + 4, c01);
  _mm256_storeu_pd(c + n, c10);
  _mm256_storeu_pd(c + n + 4, c11);
  _mm256_storeu_pd(c + 2 * n, c20);
  _mm256_storeu_pd(c + 2 * n + 4, c21);
  _mm256_storeu_pd(c + 3 * n, c30);
  _mm256_storeu_pd(c + 3 * n + 4, c31);
}

// One row, a 4-wide column strip.
inline void block_1x4(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                      bool accumulate) {
  __m256d acc = accumulate ? _mm256_loadu_pd(c) : _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    acc = _mm256_fmadd_pd(_mm256_broadcast_sd(a + p), _mm256_loadu_pd(b + p * n), acc);
  }
  _mm256_storeu_pd(c, acc);
}

inline void block_1x1(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                      bool accumulate) {
  double acc = accumulate ? *c : 0.0;
  for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p * n];
  *c = acc;
}

void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
               double* c, bool accumulate) {
  const std::size_t m4 = m - m % 4;
  const std::size_t n8 = n - n % 8;
  for (std::size_t i = 0; i < m4; i += 4) {
    for (std::size_t j = 0; j < n8; j += 8) {
      block_4x8(n, k, a + i * k, b + j, c + i * n + j, accumulate);
    }
    for (std::size_t r = 0; r < 4; ++r) {
      std::size_t j = n8;
      for (; j + 4 <= n; j += 4) block_1x4(n, k, a + (i + r) * k, b + j, c + (i + r) * n + j, accumulate);
      for (; j < n; ++j) block_1x1(n, k, a + (i + r) * k, b + j, c + (i + r) * n + j, accumulate);
    }
  }
  for (std::size_t i = m4; i < m; ++i) {
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) block_1x4(n, k, a + i * k, b + j, c + i * n + j, accumulate);
    for (; j < n; ++j) block_1x1(n, k, a + i * k, b + j, c + i * n + j, accumulate);
  }
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
  }
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

double squared_distance_avx2(const double* x, const double* y, std::size_t n) {
  __m256d s = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
    s = _mm256_fmadd_pd(d, d, s);
  }
  double r = hsum(s);
  for (; i < n; ++i) {
    const double d = x[i] - y[i];
    r += d * d;
  }
  return r;
}

}  // namespace

const KernelTable kAvx2Table{gemm_avx2, dot_avx2, axpy_avx2, squared_distance_avx2};

}  // namespace msdm::kernels::detail
