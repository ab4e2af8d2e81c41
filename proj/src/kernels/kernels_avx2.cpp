// Built with -mavx2 -mfma; only reached through avx2_table() after a CPUID check.
#include <immintrin.h>

#include "ovseg/numerics/kernels.hpp"

namespace ovseg::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

inline void store_block(double* dst, __m256d v, bool accumulate) {
  if (accumulate) v = _mm256_add_pd(_mm256_loadu_pd(dst), v);
  _mm256_storeu_pd(dst, v);
}

// 4x8 register tile: 8 accumulators, 2 B loads and 4 broadcasts per k step.
void tile_4x8(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
              bool accumulate) {
  __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
  __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
  __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
  __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + 4);
    __m256d av = _mm256_broadcast_sd(a + p);
    c00 = _mm256_fmadd_pd(av, b0, c00);
    c01 = _mm256_fmadd_pd(av, b1, c01);
    av = _mm256_broadcast_sd(a + k + p);
    c10 = _mm256_fmadd_pd(av, b0, c10);
    c11 = _mm256_fmadd_pd(av, b1, c11);
    av = _mm256_broadcast_sd(a + 2 * k + p);
    c20 = _mm256_fmadd_pd(av, b0, c20);
    c21 = _mm256_fmadd_pd(av, b1, c21);
    av = _mm256_broadcast_sd(a + 3 * k + p);
    c30 = _mm256_fmadd_pd(av, b0, c30);
    c31 = _mm256_fmadd_pd(av, b1, c31);
  }
  store_block(c, c00, accumulate);
  store_block(c + 4, c01, accumulate);
  store_block(c + n, c10, accumulate);
  store_block(c + n + 4, c11, accumulate);
  store_block(c + 2 * n, c20, accumulate);
  store_block(c + 2 * n + 4, c21, accumulate);
  store_block(c + 3 * n, c30, accumulate);
  store_block(c + 3 * n + 4, c31, accumulate);
}

// One row against 4 columns.
void tile_1x4(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
              bool accumulate) {
  __m256d acc = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    acc = _mm256_fmadd_pd(_mm256_broadcast_sd(a + p), _mm256_loadu_pd(b + p * n), acc);
  }
  store_block(c, acc, accumulate);
}

void tile_1x1(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
              bool accumulate) {
  double acc = 0.0;
  for (std::size_t p = 0; p < k; ++p) acc = __builtin_fma(a[p], b[p * n], acc);
  *c = accumulate ? *c + acc : acc;
}

void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) tile_4x8(n, k, a + i * k, b + j, c + i * n + j, accumulate);
    for (std::size_t r = 0; r < 4; ++r) {
      std::size_t jr = j;
      for (; jr + 4 <= n; jr += 4)
        tile_1x4(n, k, a + (i + r) * k, b + jr, c + (i + r) * n + jr, accumulate);
      for (; jr < n; ++jr) tile_1x1(n, k, a + (i + r) * k, b + jr, c + (i + r) * n + jr, accumulate);
    }
  }
  for (; i < m; ++i) {
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) tile_1x4(n, k, a + i * k, b + j, c + i * n + j, accumulate);
    for (; j < n; ++j) tile_1x1(n, k, a + i * k, b + j, c + i * n + j, accumulate);
  }
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
  __m256d a0 = _mm256_setzero_pd(), a1 = _mm256_setzero_pd();
  __m256d a2 = _mm256_setzero_pd(), a3 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    a0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), a0);
    a1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), a1);
    a2 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 8), _mm256_loadu_pd(y + i + 8), a2);
    a3 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 12), _mm256_loadu_pd(y + i + 12), a3);
  }
  for (; i + 4 <= n; i += 4) a0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), a0);
  double acc = hsum(_mm256_add_pd(_mm256_add_pd(a0, a1), _mm256_add_pd(a2, a3)));
  for (; i < n; ++i) acc = __builtin_fma(x[i], y[i], acc);
  return acc;
}

// Same reduction order as one lane group of the 2x4 tile, so every output of
// gemm_nt is bitwise independent of its position in the matrix.
double dot_tile_order(const double* x, const double* y, std::size_t k) {
  const std::size_t kv = k - k % 4;
  __m256d acc = _mm256_setzero_pd();
  for (std::size_t p = 0; p < kv; p += 4) acc = _mm256_fmadd_pd(_mm256_loadu_pd(x + p), _mm256_loadu_pd(y + p), acc);
  double s = hsum(acc);
  for (std::size_t p = kv; p < k; ++p) s = __builtin_fma(x[p], y[p], s);
  return s;
}

// 2 rows of a against 4 rows of b, reducing along k.
void gemm_nt_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c, bool accumulate) {
  const std::size_t kv = k - k % 4;
  auto finish = [&](double* dst, __m256d v, std::size_t ai, std::size_t bj) {
    double s = hsum(v);
    for (std::size_t p = kv; p < k; ++p) s = __builtin_fma(a[ai * k + p], b[bj * k + p], s);
    *dst = accumulate ? *dst + s : s;
  };
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      __m256d s00 = _mm256_setzero_pd(), s01 = _mm256_setzero_pd();
      __m256d s02 = _mm256_setzero_pd(), s03 = _mm256_setzero_pd();
      __m256d s10 = _mm256_setzero_pd(), s11 = _mm256_setzero_pd();
      __m256d s12 = _mm256_setzero_pd(), s13 = _mm256_setzero_pd();
      for (std::size_t p = 0; p < kv; p += 4) {
        const __m256d x0 = _mm256_loadu_pd(a0 + p);
        const __m256d x1 = _mm256_loadu_pd(a1 + p);
        __m256d y = _mm256_loadu_pd(b0 + p);
        s00 = _mm256_fmadd_pd(x0, y, s00);
        s10 = _mm256_fmadd_pd(x1, y, s10);
        y = _mm256_loadu_pd(b1 + p);
        s01 = _mm256_fmadd_pd(x0, y, s01);
        s11 = _mm256_fmadd_pd(x1, y, s11);
        y = _mm256_loadu_pd(b2 + p);
        s02 = _mm256_fmadd_pd(x0, y, s02);
        s12 = _mm256_fmadd_pd(x1, y, s12);
        y = _mm256_loadu_pd(b3 + p);
        s03 = _mm256_fmadd_pd(x0, y, s03);
        s13 = _mm256_fmadd_pd(x1, y, s13);
      }
      double* crow0 = c + i * n + j;
      double* crow1 = crow0 + n;
      finish(crow0, s00, i, j);
      finish(crow0 + 1, s01, i, j + 1);
      finish(crow0 + 2, s02, i, j + 2);
      finish(crow0 + 3, s03, i, j + 3);
      finish(crow1, s10, i + 1, j);
      finish(crow1 + 1, s11, i + 1, j + 1);
      finish(crow1 + 2, s12, i + 1, j + 2);
      finish(crow1 + 3, s13, i + 1, j + 3);
    }
    for (; j < n; ++j) {
      for (std::size_t r = 0; r < 2; ++r) {
        const double s = dot_tile_order(a + (i + r) * k, b + j * k, k);
        double* dst = c + (i + r) * n + j;
        *dst = accumulate ? *dst + s : s;
      }
    }
  }
  for (; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double s = dot_tile_order(a + i * k, b + j * k, k);
      double* dst = c + i * n + j;
      *dst = accumulate ? *dst + s : s;
    }
  }
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] = __builtin_fma(alpha, x[i], y[i]);
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{gemm_nn_avx2, gemm_nt_avx2, dot_avx2, axpy_avx2};
  return &table;
}

}  // namespace ovseg::kernels
