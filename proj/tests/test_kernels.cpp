#include <doctest.h>

#include <cmath>
#include <vector>

#include "dex/kernels.hpp"
#include "dex/rng.hpp"

using namespace dex;

namespace {

// Restores the startup backend when a test forces another one.
struct BackendGuard {
    KernelBackend saved = active_backend();
    ~BackendGuard() { set_backend(saved); }
};

template <typename T>
std::vector<T> random_vec(size_t n, Rng &rng) {
    std::vector<T> v(n);
    for (auto &x : v) x = static_cast<T>(rng.normal());
    return v;
}

template <typename T>
void expect_close(const std::vector<T> &a, const std::vector<T> &b, double tol) {
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(double(a[i])), std::abs(double(b[i])), 1.0});
        CHECK(std::abs(double(a[i]) - double(b[i])) / denom < tol);
    }
}

}  // namespace

TEST_CASE("matmul hand-computed values (scalar reference)") {
    BackendGuard guard;
    set_backend(KernelBackend::Scalar);
    // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
    std::vector<double> a{1, 2, 3, 4}, b{1, 1}, c(2);
    kernels<double>().matmul(c.data(), a.data(), b.data(), 2, 2, 1, false);
    CHECK(c[0] == 3.0);
    CHECK(c[1] == 7.0);

    // identity leaves the operand unchanged
    std::vector<double> eye{1, 0, 0, 1}, x{5, -2, 0.5, 3}, y(4);
    kernels<double>().matmul(y.data(), eye.data(), x.data(), 2, 2, 2, false);
    for (int i = 0; i < 4; ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("matmul transpose variants agree with the plain form") {
    BackendGuard guard;
    set_backend(KernelBackend::Scalar);
    Rng rng(7);
    const size_t M = 5, K = 4, N = 3;
    auto a = random_vec<double>(M * K, rng);
    auto b = random_vec<double>(K * N, rng);
    std::vector<double> ref(M * N);
    kernels<double>().matmul(ref.data(), a.data(), b.data(), M, K, N, false);

    // a^T stored as [K,M]
    std::vector<double> at(K * M);
    for (size_t i = 0; i < M; ++i)
        for (size_t p = 0; p < K; ++p) at[p * M + i] = a[i * K + p];
    std::vector<double> c1(M * N);
    kernels<double>().matmul_at(c1.data(), at.data(), b.data(), M, K, N, false);
    expect_close(c1, ref, 1e-12);

    // b^T stored as [N,K]
    std::vector<double> bt(N * K);
    for (size_t p = 0; p < K; ++p)
        for (size_t j = 0; j < N; ++j) bt[j * K + p] = b[p * N + j];
    std::vector<double> c2(M * N);
    kernels<double>().matmul_bt(c2.data(), a.data(), bt.data(), M, K, N, false);
    expect_close(c2, ref, 1e-12);

    // accumulate variant adds on top
    std::vector<double> c3 = ref;
    kernels<double>().matmul(c3.data(), a.data(), b.data(), M, K, N, true);
    for (size_t i = 0; i < M * N; ++i) CHECK(c3[i] == doctest::Approx(2 * ref[i]).epsilon(1e-12));
}

TEST_CASE("every available backend matches the scalar reference") {
    BackendGuard guard;
    Rng rng(42);
    // Deliberately awkward sizes to cover the vector remainders.
    const std::vector<size_t> sizes{1, 3, 7, 8, 9, 16, 31, 64, 127};

    for (KernelBackend backend : available_backends()) {
        if (backend == KernelBackend::Scalar) continue;
        INFO("backend ", backend_name(backend));

        for (size_t n : sizes) {
            auto xa = random_vec<double>(n, rng);
            auto xb = random_vec<double>(n, rng);

            auto run_all = [&](KernelBackend be) {
                set_backend(be);
                const auto &k = kernels<double>();
                std::vector<double> add(n), sub(n), mul(n), scl(n), axp(xb);
                k.add(add.data(), xa.data(), xb.data(), n);
                k.sub(sub.data(), xa.data(), xb.data(), n);
                k.mul(mul.data(), xa.data(), xb.data(), n);
                k.scale(scl.data(), xa.data(), 1.7, n);
                k.axpy(axp.data(), -0.3, xa.data(), n);
                std::vector<double> reductions{k.sum(xa.data(), n), k.dot(xa.data(), xb.data(), n)};
                std::vector<double> out;
                for (auto &v : {add, sub, mul, scl, axp, reductions})
                    out.insert(out.end(), v.begin(), v.end());
                return out;
            };
            auto ref = run_all(KernelBackend::Scalar);
            auto got = run_all(backend);
            expect_close(got, ref, 1e-13);
        }

        // matmul family on a non-multiple-of-vector size
        const size_t M = 7, K = 13, N = 9;
        auto a = random_vec<double>(M * K, rng);
        auto b = random_vec<double>(K * N, rng);
        auto bt = random_vec<double>(N * K, rng);
        auto at = random_vec<double>(K * M, rng);
        auto run_mm = [&](KernelBackend be) {
            set_backend(be);
            const auto &k = kernels<double>();
            std::vector<double> c1(M * N, 0.5), c2(M * N, 0.5), c3(M * N, 0.5);
            k.matmul(c1.data(), a.data(), b.data(), M, K, N, true);
            k.matmul_at(c2.data(), at.data(), b.data(), M, K, N, true);
            k.matmul_bt(c3.data(), a.data(), bt.data(), M, K, N, true);
            std::vector<double> out;
            for (auto &v : {c1, c2, c3}) out.insert(out.end(), v.begin(), v.end());
            return out;
        };
        expect_close(run_mm(backend), run_mm(KernelBackend::Scalar), 1e-13);

        // float path too
        for (size_t n : {5ul, 17ul, 40ul}) {
            auto fa = random_vec<float>(n, rng);
            auto fb = random_vec<float>(n, rng);
            auto run_f = [&](KernelBackend be) {
                set_backend(be);
                const auto &k = kernels<float>();
                std::vector<float> add(n);
                k.add(add.data(), fa.data(), fb.data(), n);
                add.push_back(k.dot(fa.data(), fb.data(), n));
                return add;
            };
            auto ref = run_f(KernelBackend::Scalar);
            auto got = run_f(backend);
            REQUIRE(ref.size() == got.size());
            for (size_t i = 0; i < ref.size(); ++i)
                CHECK(std::abs(ref[i] - got[i]) <
                      1e-5 * std::max({std::abs(ref[i]), std::abs(got[i]), 1.0f}));
        }
    }
}

TEST_CASE("backend selection is explicit and reversible") {
    BackendGuard guard;
    for (KernelBackend b : available_backends()) {
        set_backend(b);
        CHECK(active_backend() == b);
    }
}
