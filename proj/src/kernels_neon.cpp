#include "dex/kernels.hpp"

#if DEX_HAVE_NEON

#include <arm_neon.h>

// NEON backend (aarch64 baseline, so no runtime probe needed).

namespace dex::detail {
namespace {

// ---------------------------------------------------------------- float ---

void add_f32(float *dst, const float *a, const float *b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(dst + i, vaddq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_f32(float *dst, const float *a, const float *b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(dst + i, vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_f32(float *dst, const float *a, const float *b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(dst + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_f32(float *dst, const float *a, float s, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(dst + i, vmulq_n_f32(vld1q_f32(a + i), s));
    for (; i < n; ++i) dst[i] = s * a[i];
}

void axpy_f32(float *dst, float a, const float *x, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        vst1q_f32(dst + i, vfmaq_n_f32(vld1q_f32(dst + i), vld1q_f32(x + i), a));
    for (; i < n; ++i) dst[i] += a * x[i];
}

float sum_f32(const float *a, size_t n) {
    float32x4_t acc = vdupq_n_f32(0.0f);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(a + i));
    float s = vaddvq_f32(acc);
    for (; i < n; ++i) s += a[i];
    return s;
}

float dot_f32(const float *a, const float *b, size_t n) {
    float32x4_t acc = vdupq_n_f32(0.0f);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = vfmaq_f32(acc, vld1q_f32(a + i), vld1q_f32(b + i));
    float s = vaddvq_f32(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void matmul_f32(float *c, const float *a, const float *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        float *crow = c + i * n;
        if (!acc)
            for (size_t j = 0; j < n; ++j) crow[j] = 0.0f;
        for (size_t p = 0; p < k; ++p) axpy_f32(crow, a[i * k + p], b + p * n, n);
    }
}

void matmul_at_f32(float *c, const float *a, const float *b, size_t m, size_t k, size_t n, bool acc) {
    if (!acc)
        for (size_t i = 0; i < m * n; ++i) c[i] = 0.0f;
    for (size_t p = 0; p < k; ++p)
        for (size_t i = 0; i < m; ++i) axpy_f32(c + i * n, a[p * m + i], b + p * n, n);
}

void matmul_bt_f32(float *c, const float *a, const float *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
            const float d = dot_f32(a + i * k, b + j * k, k);
            c[i * n + j] = acc ? c[i * n + j] + d : d;
        }
}

// --------------------------------------------------------------- double ---

void add_f64(double *dst, const double *a, const double *b, size_t n) {
    size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_f64(double *dst, const double *a, const double *b, size_t n) {
    size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_f64(double *dst, const double *a, const double *b, size_t n) {
    size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_f64(double *dst, const double *a, double s, size_t n) {
    size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vmulq_n_f64(vld1q_f64(a + i), s));
    for (; i < n; ++i) dst[i] = s * a[i];
}

void axpy_f64(double *dst, double a, const double *x, size_t n) {
    size_t i = 0;
    for (; i + 2 <= n; i += 2)
        vst1q_f64(dst + i, vfmaq_n_f64(vld1q_f64(dst + i), vld1q_f64(x + i), a));
    for (; i < n; ++i) dst[i] += a * x[i];
}

double sum_f64(const double *a, size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(a + i));
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += a[i];
    return s;
}

double dot_f64(const double *a, const double *b, size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void matmul_f64(double *c, const double *a, const double *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        double *crow = c + i * n;
        if (!acc)
            for (size_t j = 0; j < n; ++j) crow[j] = 0.0;
        for (size_t p = 0; p < k; ++p) axpy_f64(crow, a[i * k + p], b + p * n, n);
    }
}

void matmul_at_f64(double *c, const double *a, const double *b, size_t m, size_t k, size_t n, bool acc) {
    if (!acc)
        for (size_t i = 0; i < m * n; ++i) c[i] = 0.0;
    for (size_t p = 0; p < k; ++p)
        for (size_t i = 0; i < m; ++i) axpy_f64(c + i * n, a[p * m + i], b + p * n, n);
}

void matmul_bt_f64(double *c, const double *a, const double *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
            const double d = dot_f64(a + i * k, b + j * k, k);
            c[i * n + j] = acc ? c[i * n + j] + d : d;
        }
}

}  // namespace

template <>
const Kernels<float> &neon_kernels<float>() {
    static const Kernels<float> k = {add_f32, sub_f32, mul_f32, scale_f32, axpy_f32,
                                     sum_f32, dot_f32, matmul_f32, matmul_at_f32, matmul_bt_f32};
    return k;
}

template <>
const Kernels<double> &neon_kernels<double>() {
    static const Kernels<double> k = {add_f64, sub_f64, mul_f64, scale_f64, axpy_f64,
                                      sum_f64, dot_f64, matmul_f64, matmul_at_f64, matmul_bt_f64};
    return k;
}

}  // namespace dex::detail

#endif  // DEX_HAVE_NEON
