#include "dex/kernels.hpp"

#include <atomic>
#include <cstdlib>

#include "dex/errors.hpp"

namespace dex {

namespace {

KernelBackend pick_default() {
    if (const char *env = std::getenv("DEX_KERNELS")) {
        std::string s(env);
        if (s == "scalar") return KernelBackend::Scalar;
#if DEX_HAVE_AVX2
        if (s == "avx2") {
            if (!detail::avx2_supported()) throw ConfigError("DEX_KERNELS=avx2 but CPU lacks AVX2/FMA");
            return KernelBackend::Avx2;
        }
#endif
#if DEX_HAVE_NEON
        if (s == "neon") return KernelBackend::Neon;
#endif
        throw ConfigError("unknown DEX_KERNELS value: " + s);
    }
#if DEX_HAVE_AVX2
    if (detail::avx2_supported()) return KernelBackend::Avx2;
#endif
#if DEX_HAVE_NEON
    return KernelBackend::Neon;
#endif
    return KernelBackend::Scalar;
}

std::atomic<KernelBackend> g_backend{pick_default()};

}  // namespace

KernelBackend active_backend() { return g_backend.load(std::memory_order_relaxed); }

void set_backend(KernelBackend b) {
    for (KernelBackend avail : available_backends())
        if (avail == b) {
            g_backend.store(b, std::memory_order_relaxed);
            return;
        }
    throw ConfigError("kernel backend not available on this machine: " + backend_name(b));
}

std::vector<KernelBackend> available_backends() {
    std::vector<KernelBackend> v{KernelBackend::Scalar};
#if DEX_HAVE_AVX2
    if (detail::avx2_supported()) v.push_back(KernelBackend::Avx2);
#endif
#if DEX_HAVE_NEON
    v.push_back(KernelBackend::Neon);
#endif
    return v;
}

std::string backend_name(KernelBackend b) {
    switch (b) {
        case KernelBackend::Scalar: return "scalar";
        case KernelBackend::Avx2: return "avx2";
        case KernelBackend::Neon: return "neon";
    }
    return "?";
}

template <typename T>
const Kernels<T> &kernels() {
    switch (active_backend()) {
#if DEX_HAVE_AVX2
        case KernelBackend::Avx2: return detail::avx2_kernels<T>();
#endif
#if DEX_HAVE_NEON
        case KernelBackend::Neon: return detail::neon_kernels<T>();
#endif
        default: return detail::scalar_kernels<T>();
    }
}

template const Kernels<float> &kernels<float>();
template const Kernels<double> &kernels<double>();

}  // namespace dex
