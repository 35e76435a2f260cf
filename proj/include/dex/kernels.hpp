#pragma once

#include <cstddef>
#include <string>
#include <vector>

// Low-level dense kernels. A scalar reference backend is always present;
// vectorized backends (AVX2 on x86-64, NEON on aarch64) are selected at
// runtime when the CPU supports them. All backends share the same contract
// and are equivalence-tested against the scalar reference.
//
// Matmul naming: M,N are output dims, K is the contraction dim.
//   matmul    C[M,N] (+)= A[M,K]  * B[K,N]
//   matmul_at C[M,N] (+)= A[K,M]^T* B[K,N]
//   matmul_bt C[M,N] (+)= A[M,K]  * B[N,K]^T
// The k-accumulation order per output element is fixed (ascending k) in
// every backend, so results are reproducible run to run.

namespace dex {

enum class KernelBackend { Scalar, Avx2, Neon };

template <typename T>
struct Kernels {
    void (*add)(T *dst, const T *a, const T *b, size_t n);
    void (*sub)(T *dst, const T *a, const T *b, size_t n);
    void (*mul)(T *dst, const T *a, const T *b, size_t n);
    void (*scale)(T *dst, const T *a, T s, size_t n);          // dst = s*a
    void (*axpy)(T *dst, T a, const T *x, size_t n);           // dst += a*x
    T (*sum)(const T *a, size_t n);
    T (*dot)(const T *a, const T *b, size_t n);
    void (*matmul)(T *c, const T *a, const T *b, size_t m, size_t k, size_t n, bool acc);
    void (*matmul_at)(T *c, const T *a, const T *b, size_t m, size_t k, size_t n, bool acc);
    void (*matmul_bt)(T *c, const T *a, const T *b, size_t m, size_t k, size_t n, bool acc);
};

template <typename T>
const Kernels<T> &kernels();

// Backend selection. The default is the best backend the CPU supports;
// DEX_KERNELS=scalar|avx2|neon overrides it (checked once at startup).
KernelBackend active_backend();
void set_backend(KernelBackend b);
std::vector<KernelBackend> available_backends();
std::string backend_name(KernelBackend b);

namespace detail {
template <typename T> const Kernels<T> &scalar_kernels();
#if DEX_HAVE_AVX2
template <typename T> const Kernels<T> &avx2_kernels();
bool avx2_supported();
#endif
#if DEX_HAVE_NEON
template <typename T> const Kernels<T> &neon_kernels();
#endif
}  // namespace detail

}  // namespace dex
