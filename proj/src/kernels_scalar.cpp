#include "dex/kernels.hpp"

// Reference implementations. Every other backend must match these on the
// shared contract; equivalence tests live in tests/test_kernels.cpp.

namespace dex::detail {
namespace {

template <typename T>
void add_impl(T *dst, const T *a, const T *b, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}

template <typename T>
void sub_impl(T *dst, const T *a, const T *b, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = a[i] - b[i];
}

template <typename T>
void mul_impl(T *dst, const T *a, const T *b, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}

template <typename T>
void scale_impl(T *dst, const T *a, T s, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = s * a[i];
}

template <typename T>
void axpy_impl(T *dst, T a, const T *x, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] += a * x[i];
}

template <typename T>
T sum_impl(const T *a, size_t n) {
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}

template <typename T>
T dot_impl(const T *a, const T *b, size_t n) {
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

// c[M,N] (+)= a[M,K] * b[K,N], row-of-b accumulation (vector friendly and
// k-ordered per output element).
template <typename T>
void matmul_impl(T *c, const T *a, const T *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        T *crow = c + i * n;
        if (!acc)
            for (size_t j = 0; j < n; ++j) crow[j] = T(0);
        for (size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            const T *brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// c[M,N] (+)= a^T * b with a[K,M], b[K,N].
template <typename T>
void matmul_at_impl(T *c, const T *a, const T *b, size_t m, size_t k, size_t n, bool acc) {
    if (!acc)
        for (size_t i = 0; i < m * n; ++i) c[i] = T(0);
    for (size_t p = 0; p < k; ++p) {
        const T *arow = a + p * m;
        const T *brow = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            const T api = arow[i];
            T *crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

// c[M,N] (+)= a * b^T with a[M,K], b[N,K].
template <typename T>
void matmul_bt_impl(T *c, const T *a, const T *b, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        const T *arow = a + i * k;
        T *crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            T accv = acc ? crow[j] : T(0);
            const T *brow = b + j * k;
            for (size_t p = 0; p < k; ++p) accv += arow[p] * brow[p];
            crow[j] = accv;
        }
    }
}

template <typename T>
Kernels<T> make_scalar() {
    Kernels<T> k;
    k.add = add_impl<T>;
    k.sub = sub_impl<T>;
    k.mul = mul_impl<T>;
    k.scale = scale_impl<T>;
    k.axpy = axpy_impl<T>;
    k.sum = sum_impl<T>;
    k.dot = dot_impl<T>;
    k.matmul = matmul_impl<T>;
    k.matmul_at = matmul_at_impl<T>;
    k.matmul_bt = matmul_bt_impl<T>;
    return k;
}

}  // namespace

template <typename T>
const Kernels<T> &scalar_kernels() {
    static const Kernels<T> k = make_scalar<T>();
    return k;
}

template const Kernels<float> &scalar_kernels<float>();
template const Kernels<double> &scalar_kernels<double>();

}  // namespace dex::detail
