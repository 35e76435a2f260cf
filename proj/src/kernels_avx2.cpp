#include "dex/kernels.hpp"

#if DEX_HAVE_AVX2

#include <immintrin.h>

// AVX2+FMA backend. Compiled with -mavx2 -mfma in its own TU; only reached
// after the runtime cpuid check in kernels.cpp.

namespace dex::detail {
namespace {

// ---------------------------------------------------------------- float ---

inline __m256 load8(const float *p) { return _mm256_loadu_ps(p); }
inline void store8(float *p, __m256 v) { _mm256_storeu_ps(p, v); }

inline float hsum8(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
    return _mm_cvtss_f32(lo);
}

void add_f32(float *dst, const float *a, const float *b, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) store8(dst + i, _mm256_add_ps(load8(a + i), load8(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_f32(float *dst, const float *a, const float *b, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) store8(dst + i, _mm256_sub_ps(load8(a + i), load8(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_f32(float *dst, const float *a, const float *b, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) store8(dst + i, _mm256_mul_ps(load8(a + i), load8(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_f32(float *dst, const float *a, float s, size_t n) {
    const __m256 vs = _mm256_set1_ps(s);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) store8(dst + i, _mm256_mul_ps(vs, load8(a + i)));
    for (; i < n; ++i) dst[i] = s * a[i];
}

void axpy_f32(float *dst, float a, const float *x, size_t n) {
    const __m256 va = _mm256_set1_ps(a);
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        store8(dst + i, _mm256_fmadd_ps(va, load8(x + i), load8(dst + i)));
    for (; i < n; ++i) dst[i] += a * x[i];
}

float sum_f32(const float *a, size_t n) {
    __m256 acc = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, load8(a + i));
    float s = hsum8(acc);
    for (; i < n; ++i) s += a[i];
    return s;
}

float dot_f32(const float *a, const float *b, size_t n) {
    __m256 acc = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_fmadd_ps(load8(a + i), load8(b + i), acc);
    float s = hsum8(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void matmul_f32(float *c, const float *a, const float *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        float *crow = c + i * n;
        if (!acc)
            for (size_t j = 0; j < n; ++j) crow[j] = 0.0f;
        for (size_t p = 0; p < k; ++p) {
            const float aip = a[i * k + p];
            axpy_f32(crow, aip, b + p * n, n);
        }
    }
}

void matmul_at_f32(float *c, const float *a, const float *b, size_t m, size_t k, size_t n, bool acc) {
    if (!acc)
        for (size_t i = 0; i < m * n; ++i) c[i] = 0.0f;
    for (size_t p = 0; p < k; ++p) {
        const float *arow = a + p * m;
        const float *brow = b + p * n;
        for (size_t i = 0; i < m; ++i) axpy_f32(c + i * n, arow[i], brow, n);
    }
}

void matmul_bt_f32(float *c, const float *a, const float *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        const float *arow = a + i * k;
        float *crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const float d = dot_f32(arow, b + j * k, k);
            crow[j] = acc ? crow[j] + d : d;
        }
    }
}

// --------------------------------------------------------------- double ---

inline __m256d load4(const double *p) { return _mm256_loadu_pd(p); }
inline void store4(double *p, __m256d v) { _mm256_storeu_pd(p, v); }

inline double hsum4(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

void add_f64(double *dst, const double *a, const double *b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) store4(dst + i, _mm256_add_pd(load4(a + i), load4(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_f64(double *dst, const double *a, const double *b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) store4(dst + i, _mm256_sub_pd(load4(a + i), load4(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_f64(double *dst, const double *a, const double *b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) store4(dst + i, _mm256_mul_pd(load4(a + i), load4(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_f64(double *dst, const double *a, double s, size_t n) {
    const __m256d vs = _mm256_set1_pd(s);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) store4(dst + i, _mm256_mul_pd(vs, load4(a + i)));
    for (; i < n; ++i) dst[i] = s * a[i];
}

void axpy_f64(double *dst, double a, const double *x, size_t n) {
    const __m256d va = _mm256_set1_pd(a);
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        store4(dst + i, _mm256_fmadd_pd(va, load4(x + i), load4(dst + i)));
    for (; i < n; ++i) dst[i] += a * x[i];
}

double sum_f64(const double *a, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, load4(a + i));
    double s = hsum4(acc);
    for (; i < n; ++i) s += a[i];
    return s;
}

double dot_f64(const double *a, const double *b, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_fmadd_pd(load4(a + i), load4(b + i), acc);
    double s = hsum4(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void matmul_f64(double *c, const double *a, const double *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        double *crow = c + i * n;
        if (!acc)
            for (size_t j = 0; j < n; ++j) crow[j] = 0.0;
        for (size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            axpy_f64(crow, aip, b + p * n, n);
        }
    }
}

void matmul_at_f64(double *c, const double *a, const double *b, size_t m, size_t k, size_t n, bool acc) {
    if (!acc)
        for (size_t i = 0; i < m * n; ++i) c[i] = 0.0;
    for (size_t p = 0; p < k; ++p) {
        const double *arow = a + p * m;
        const double *brow = b + p * n;
        for (size_t i = 0; i < m; ++i) axpy_f64(c + i * n, arow[i], brow, n);
    }
}

void matmul_bt_f64(double *c, const double *a, const double *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        const double *arow = a + i * k;
        double *crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const double d = dot_f64(arow, b + j * k, k);
            crow[j] = acc ? crow[j] + d : d;
        }
    }
}

}  // namespace

bool avx2_supported() {
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

template <>
const Kernels<float> &avx2_kernels<float>() {
    static const Kernels<float> k = {add_f32, sub_f32, mul_f32, scale_f32, axpy_f32,
                                     sum_f32, dot_f32, matmul_f32, matmul_at_f32, matmul_bt_f32};
    return k;
}

template <>
const Kernels<double> &avx2_kernels<double>() {
    static const Kernels<double> k = {add_f64, sub_f64, mul_f64, scale_f64, axpy_f64,
                                      sum_f64, dot_f64, matmul_f64, matmul_at_f64, matmul_bt_f64};
    return k;
}

}  // namespace dex::detail

#endif  // DEX_HAVE_AVX2
