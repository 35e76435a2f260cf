#include "dex/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dex/kernels.hpp"

namespace dex {

namespace {

template <typename T>
void check_same_shape(const Tensor<T> &a, const Tensor<T> &b, const char *op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
Tensor<T> new_out(Shape shape) {
    return Tensor<T>::zeros(std::move(shape));
}

// Shared boilerplate: mark the output and register the backward closure.
template <typename T, typename Fn>
void record_op(std::vector<Tensor<T>> inputs, Tensor<T> &out, Fn &&backward) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(std::move(inputs), out, std::forward<Fn>(backward));
}

}  // namespace

// ---------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    auto out = new_out<T>({a.dim(0), b.dim(1)});
    kernels<T>().matmul(out.data(), a.data(), b.data(), M, K, N, false);
    if (recording<T>({&a, &b})) {
        record_op<T>({a, b}, out, [a, b, out]() mutable {
            const T *g = out.grad_data();
            const size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
            if (a.requires_grad()) kernels<T>().matmul_bt(a.grad_data(), g, b.data(), M, N, K, true);
            if (b.requires_grad()) kernels<T>().matmul_at(b.grad_data(), a.data(), g, K, M, N, true);
        });
    }
    return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T> &a, const Tensor<T> &b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const size_t G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    auto out = new_out<T>({a.dim(0), a.dim(1), b.dim(2)});
    for (size_t gi = 0; gi < G; ++gi)
        kernels<T>().matmul(out.data() + gi * M * N, a.data() + gi * M * K, b.data() + gi * K * N,
                            M, K, N, false);
    if (recording<T>({&a, &b})) {
        record_op<T>({a, b}, out, [a, b, out]() mutable {
            const size_t G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
            const T *g = out.grad_data();
            for (size_t gi = 0; gi < G; ++gi) {
                const T *gg = g + gi * M * N;
                if (a.requires_grad())
                    kernels<T>().matmul_bt(a.grad_data() + gi * M * K, gg, b.data() + gi * K * N,
                                           M, N, K, true);
                if (b.requires_grad())
                    kernels<T>().matmul_at(b.grad_data() + gi * K * N, a.data() + gi * M * K, gg,
                                           K, M, N, true);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> bmm_nt(const Tensor<T> &a, const Tensor<T> &b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw ShapeError("bmm_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const size_t G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
    auto out = new_out<T>({a.dim(0), a.dim(1), b.dim(1)});
    for (size_t gi = 0; gi < G; ++gi)
        kernels<T>().matmul_bt(out.data() + gi * M * N, a.data() + gi * M * K,
                               b.data() + gi * N * K, M, K, N, false);
    if (recording<T>({&a, &b})) {
        record_op<T>({a, b}, out, [a, b, out]() mutable {
            const size_t G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
            const T *g = out.grad_data();
            for (size_t gi = 0; gi < G; ++gi) {
                const T *gg = g + gi * M * N;
                if (a.requires_grad())
                    kernels<T>().matmul(a.grad_data() + gi * M * K, gg, b.data() + gi * N * K,
                                        M, N, K, true);
                if (b.requires_grad())
                    kernels<T>().matmul_at(b.grad_data() + gi * N * K, gg, a.data() + gi * M * K,
                                           N, M, K, true);
            }
        });
    }
    return out;
}

// ------------------------------------------------------ elementwise/affine

template <typename T>
Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b) {
    check_same_shape(a, b, "add");
    auto out = new_out<T>(a.shape());
    const size_t n = a.numel();
    kernels<T>().add(out.data(), a.data(), b.data(), n);
    if (recording<T>({&a, &b})) {
        record_op<T>({a, b}, out, [a, b, out]() mutable {
            const T *g = out.grad_data();
            const size_t n = out.numel();
            if (a.requires_grad()) kernels<T>().axpy(a.grad_data(), T(1), g, n);
            if (b.requires_grad()) kernels<T>().axpy(b.grad_data(), T(1), g, n);
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T> &a, const Tensor<T> &b) {
    check_same_shape(a, b, "sub");
    auto out = new_out<T>(a.shape());
    const size_t n = a.numel();
    kernels<T>().sub(out.data(), a.data(), b.data(), n);
    if (recording<T>({&a, &b})) {
        record_op<T>({a, b}, out, [a, b, out]() mutable {
            const T *g = out.grad_data();
            const size_t n = out.numel();
            if (a.requires_grad()) kernels<T>().axpy(a.grad_data(), T(1), g, n);
            if (b.requires_grad()) kernels<T>().axpy(b.grad_data(), T(-1), g, n);
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b) {
    check_same_shape(a, b, "mul");
    auto out = new_out<T>(a.shape());
    const size_t n = a.numel();
    kernels<T>().mul(out.data(), a.data(), b.data(), n);
    if (recording<T>({&a, &b})) {
        record_op<T>({a, b}, out, [a, b, out]() mutable {
            const T *g = out.grad_data();
            const size_t n = out.numel();
            if (a.requires_grad()) {
                T *ga = a.grad_data();
                const T *bd = b.data();
                for (size_t i = 0; i < n; ++i) ga[i] += g[i] * bd[i];
            }
            if (b.requires_grad()) {
                T *gb = b.grad_data();
                const T *ad = a.data();
                for (size_t i = 0; i < n; ++i) gb[i] += g[i] * ad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T> &a, T s) {
    auto out = new_out<T>(a.shape());
    kernels<T>().scale(out.data(), a.data(), s, a.numel());
    if (recording<T>({&a})) {
        record_op<T>({a}, out, [a, out, s]() mutable {
            kernels<T>().axpy(a.grad_data(), s, out.grad_data(), out.numel());
        });
    }
    return out;
}

template <typename T>
Tensor<T> affine(const Tensor<T> &a, T m, T c) {
    auto out = new_out<T>(a.shape());
    const T *x = a.data();
    T *y = out.data();
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) y[i] = m * x[i] + c;
    if (recording<T>({&a})) {
        record_op<T>({a}, out, [a, out, m]() mutable {
            kernels<T>().axpy(a.grad_data(), m, out.grad_data(), out.numel());
        });
    }
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T> &a) {
    auto out = new_out<T>(a.shape());
    const T *x = a.data();
    T *y = out.data();
    const size_t n = a.numel();
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    for (size_t i = 0; i < n; ++i) {
        const double xv = static_cast<double>(x[i]);
        y[i] = static_cast<T>(0.5 * xv * (1.0 + std::erf(xv * inv_sqrt2)));
    }
    if (recording<T>({&a})) {
        record_op<T>({a}, out, [a, out]() mutable {
            const T *g = out.grad_data();
            const T *x = a.data();
            T *ga = a.grad_data();
            const size_t n = a.numel();
            const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
            const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
            for (size_t i = 0; i < n; ++i) {
                const double xv = static_cast<double>(x[i]);
                const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
                const double pdf = std::exp(-0.5 * xv * xv) * inv_sqrt2pi;
                ga[i] += g[i] * static_cast<T>(cdf + xv * pdf);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_rows(const Tensor<T> &x, const Tensor<T> &v) {
    if (x.rank() < 1 || v.rank() != 1 || x.dim(x.rank() - 1) != v.dim(0))
        throw ShapeError("add_rows: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const size_t C = v.dim(0);
    const size_t rows = x.numel() / C;
    auto out = new_out<T>(x.shape());
    for (size_t r = 0; r < rows; ++r)
        kernels<T>().add(out.data() + r * C, x.data() + r * C, v.data(), C);
    if (recording<T>({&x, &v})) {
        record_op<T>({x, v}, out, [x, v, out]() mutable {
            const T *g = out.grad_data();
            const size_t C = v.dim(0);
            const size_t rows = x.numel() / C;
            if (x.requires_grad()) kernels<T>().axpy(x.grad_data(), T(1), g, x.numel());
            if (v.requires_grad()) {
                T *gv = v.grad_data();
                for (size_t r = 0; r < rows; ++r) kernels<T>().axpy(gv, T(1), g + r * C, C);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul_cols(const Tensor<T> &x, const Tensor<T> &v) {
    if (x.rank() < 1 || v.rank() != 1 || x.dim(x.rank() - 1) != v.dim(0))
        throw ShapeError("mul_cols: " + shape_str(x.shape()) + " * " + shape_str(v.shape()));
    const size_t C = v.dim(0);
    const size_t rows = x.numel() / C;
    auto out = new_out<T>(x.shape());
    for (size_t r = 0; r < rows; ++r)
        kernels<T>().mul(out.data() + r * C, x.data() + r * C, v.data(), C);
    if (recording<T>({&x, &v})) {
        record_op<T>({x, v}, out, [x, v, out]() mutable {
            const T *g = out.grad_data();
            const size_t C = v.dim(0);
            const size_t rows = x.numel() / C;
            if (x.requires_grad()) {
                T *gx = x.grad_data();
                const T *vd = v.data();
                for (size_t r = 0; r < rows; ++r)
                    for (size_t c = 0; c < C; ++c) gx[r * C + c] += g[r * C + c] * vd[c];
            }
            if (v.requires_grad()) {
                T *gv = v.grad_data();
                const T *xd = x.data();
                for (size_t r = 0; r < rows; ++r)
                    for (size_t c = 0; c < C; ++c) gv[c] += g[r * C + c] * xd[r * C + c];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_bcast0(const Tensor<T> &x, const Tensor<T> &p) {
    if (x.rank() < 2) throw ShapeError("add_bcast0 needs rank >= 2, got " + shape_str(x.shape()));
    const int64_t B = x.dim(0);
    const int64_t rest = x.numel() / B;
    if (p.numel() != rest)
        throw ShapeError("add_bcast0: " + shape_str(x.shape()) + " + " + shape_str(p.shape()));
    auto x2 = x.reshape({B, rest});
    auto p1 = p.reshape({rest});
    return add_rows(x2, p1).reshape(x.shape());
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T> &x, const Tensor<T> &w) {
    if (w.rank() != 1 || x.rank() < 1 || x.dim(0) != w.dim(0))
        throw ShapeError("scale_rows: " + shape_str(x.shape()) + " by " + shape_str(w.shape()));
    const size_t B = x.dim(0);
    const size_t stride = x.numel() / B;
    auto out = new_out<T>(x.shape());
    for (size_t b = 0; b < B; ++b)
        kernels<T>().scale(out.data() + b * stride, x.data() + b * stride, w.data()[b], stride);
    if (recording<T>({&x, &w})) {
        record_op<T>({x, w}, out, [x, w, out]() mutable {
            const T *g = out.grad_data();
            const size_t B = x.dim(0);
            const size_t stride = x.numel() / B;
            if (x.requires_grad()) {
                T *gx = x.grad_data();
                for (size_t b = 0; b < B; ++b)
                    kernels<T>().axpy(gx + b * stride, w.data()[b], g + b * stride, stride);
            }
            if (w.requires_grad()) {
                T *gw = w.grad_data();
                for (size_t b = 0; b < B; ++b)
                    gw[b] += kernels<T>().dot(g + b * stride, x.data() + b * stride, stride);
            }
        });
    }
    return out;
}

// ------------------------------------------------ normalization/activation

template <typename T>
Tensor<T> layer_norm(const Tensor<T> &x, const Tensor<T> &gamma, const Tensor<T> &beta, T eps) {
    const int64_t C = x.dim(x.rank() - 1);
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeError("layer_norm: feature dim " + std::to_string(C) + " vs gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    const size_t rows = x.numel() / C;
    auto out = new_out<T>(x.shape());
    // xhat and 1/std are needed by the backward rule.
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    const T *xd = x.data();
    T *y = out.data();
    for (size_t r = 0; r < rows; ++r) {
        const T *row = xd + r * C;
        double mu = 0;
        for (int64_t c = 0; c < C; ++c) mu += row[c];
        mu /= static_cast<double>(C);
        double var = 0;
        for (int64_t c = 0; c < C; ++c) {
            const double d = row[c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(C);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*inv_std)[r] = static_cast<T>(inv);
        for (int64_t c = 0; c < C; ++c) {
            const T xh = static_cast<T>((row[c] - mu) * inv);
            (*xhat)[r * C + c] = xh;
            y[r * C + c] = gamma.data()[c] * xh + beta.data()[c];
        }
    }
    if (recording<T>({&x, &gamma, &beta})) {
        record_op<T>({x, gamma, beta}, out, [x, gamma, beta, out, xhat, inv_std]() mutable {
            const int64_t C = x.dim(x.rank() - 1);
            const size_t rows = x.numel() / C;
            const T *g = out.grad_data();
            for (size_t r = 0; r < rows; ++r) {
                const T *grow = g + r * C;
                const T *xh = xhat->data() + r * C;
                if (gamma.requires_grad()) {
                    T *gg = gamma.grad_data();
                    for (int64_t c = 0; c < C; ++c) gg[c] += grow[c] * xh[c];
                }
                if (beta.requires_grad()) {
                    T *gb = beta.grad_data();
                    for (int64_t c = 0; c < C; ++c) gb[c] += grow[c];
                }
                if (x.requires_grad()) {
                    double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat*xhat)
                    for (int64_t c = 0; c < C; ++c) {
                        const double dxh = grow[c] * gamma.data()[c];
                        m1 += dxh;
                        m2 += dxh * xh[c];
                    }
                    m1 /= static_cast<double>(C);
                    m2 /= static_cast<double>(C);
                    T *gx = x.grad_data() + r * C;
                    const double inv = (*inv_std)[r];
                    for (int64_t c = 0; c < C; ++c) {
                        const double dxh = grow[c] * gamma.data()[c];
                        gx[c] += static_cast<T>((dxh - m1 - xh[c] * m2) * inv);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T> &x, int axis) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank())
        throw ShapeError("softmax: bad axis for " + shape_str(x.shape()));
    if (!x.all_finite()) throw NumericError("softmax input contains NaN/Inf");
    const int64_t L = x.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    auto out = new_out<T>(x.shape());
    const T *xd = x.data();
    T *y = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * L * inner + i;
            T mx = xd[base];
            for (int64_t j = 1; j < L; ++j) mx = std::max(mx, xd[base + j * inner]);
            double denom = 0;
            for (int64_t j = 0; j < L; ++j) {
                const double e = std::exp(static_cast<double>(xd[base + j * inner] - mx));
                y[base + j * inner] = static_cast<T>(e);
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (int64_t j = 0; j < L; ++j)
                y[base + j * inner] = static_cast<T>(y[base + j * inner] * inv);
        }
    if (recording<T>({&x})) {
        record_op<T>({x}, out, [x, out, L, outer, inner]() mutable {
            const T *g = out.grad_data();
            const T *y = out.data();
            T *gx = x.grad_data();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    const int64_t base = o * L * inner + i;
                    double dot = 0;
                    for (int64_t j = 0; j < L; ++j)
                        dot += static_cast<double>(g[base + j * inner]) * y[base + j * inner];
                    for (int64_t j = 0; j < L; ++j)
                        gx[base + j * inner] += static_cast<T>(
                            y[base + j * inner] * (static_cast<double>(g[base + j * inner]) - dot));
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T> &w) {
    if (w.rank() != 2) throw ShapeError("normalize_rows needs rank 2, got " + shape_str(w.shape()));
    const int64_t B = w.dim(0), K = w.dim(1);
    auto out = new_out<T>(w.shape());
    auto sums = std::make_shared<std::vector<T>>(B);
    for (int64_t b = 0; b < B; ++b) {
        const T s = kernels<T>().sum(w.data() + b * K, K);
        if (!(s > T(0))) throw NumericError("normalize_rows: non-positive row sum");
        (*sums)[b] = s;
        kernels<T>().scale(out.data() + b * K, w.data() + b * K, T(1) / s, K);
    }
    if (recording<T>({&w})) {
        record_op<T>({w}, out, [w, out, sums]() mutable {
            const int64_t B = w.dim(0), K = w.dim(1);
            const T *g = out.grad_data();
            const T *y = out.data();
            T *gw = w.grad_data();
            for (int64_t b = 0; b < B; ++b) {
                const T dot = kernels<T>().dot(g + b * K, y + b * K, K);
                const T inv = T(1) / (*sums)[b];
                for (int64_t k = 0; k < K; ++k) gw[b * K + k] += (g[b * K + k] - dot) * inv;
            }
        });
    }
    return out;
}

// --------------------------------------------------- reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T> &x) {
    auto out = Tensor<T>::scalar(kernels<T>().sum(x.data(), x.numel()));
    if (recording<T>({&x})) {
        record_op<T>({x}, out, [x, out]() mutable {
            const T g = out.grad_data()[0];
            T *gx = x.grad_data();
            const size_t n = x.numel();
            for (size_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T> &x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    auto out = Tensor<T>::scalar(kernels<T>().sum(x.data(), x.numel()) * inv);
    if (recording<T>({&x})) {
        record_op<T>({x}, out, [x, out, inv]() mutable {
            const T g = out.grad_data()[0] * inv;
            T *gx = x.grad_data();
            const size_t n = x.numel();
            for (size_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_tokens(const Tensor<T> &x) {
    if (x.rank() != 3) throw ShapeError("mean_tokens needs [B,N,C], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
    auto out = new_out<T>({B, C});
    const T inv = T(1) / static_cast<T>(N);
    for (int64_t b = 0; b < B; ++b) {
        T *row = out.data() + b * C;
        for (int64_t n = 0; n < N; ++n)
            kernels<T>().axpy(row, inv, x.data() + (b * N + n) * C, C);
    }
    if (recording<T>({&x})) {
        record_op<T>({x}, out, [x, out, inv]() mutable {
            const int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
            const T *g = out.grad_data();
            T *gx = x.grad_data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t n = 0; n < N; ++n)
                    kernels<T>().axpy(gx + (b * N + n) * C, inv, g + b * C, C);
        });
    }
    return out;
}

template <typename T>
Tensor<T> mse(const Tensor<T> &pred, const Tensor<T> &target) {
    check_same_shape(pred, target, "mse");
    const size_t n = pred.numel();
    double acc = 0;
    for (size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred.data()[i]) - target.data()[i];
        acc += d * d;
    }
    auto out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    if (recording<T>({&pred, &target})) {
        record_op<T>({pred, target}, out, [pred, target, out]() mutable {
            const size_t n = pred.numel();
            const T g = out.grad_data()[0] * T(2) / static_cast<T>(n);
            if (pred.requires_grad()) {
                T *gp = pred.grad_data();
                for (size_t i = 0; i < n; ++i) gp[i] += g * (pred.data()[i] - target.data()[i]);
            }
            if (target.requires_grad()) {
                T *gt = target.grad_data();
                for (size_t i = 0; i < n; ++i) gt[i] -= g * (pred.data()[i] - target.data()[i]);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> masked_mse(const Tensor<T> &pred, const Tensor<T> &target,
                     const std::vector<uint8_t> &mask) {
    check_same_shape(pred, target, "masked_mse");
    if (pred.rank() != 3) throw ShapeError("masked_mse needs [B,N,P], got " + shape_str(pred.shape()));
    const int64_t B = pred.dim(0), N = pred.dim(1), P = pred.dim(2);
    if (static_cast<int64_t>(mask.size()) != B * N)
        throw ShapeError("masked_mse: mask length " + std::to_string(mask.size()) + " vs B*N");
    int64_t masked = 0;
    for (uint8_t m : mask) masked += m ? 1 : 0;
    if (masked == 0) throw ContractError("masked_mse: empty mask");
    double acc = 0;
    for (int64_t t = 0; t < B * N; ++t) {
        if (!mask[t]) continue;
        const T *p = pred.data() + t * P;
        const T *q = target.data() + t * P;
        for (int64_t c = 0; c < P; ++c) {
            const double d = static_cast<double>(p[c]) - q[c];
            acc += d * d;
        }
    }
    const double denom = static_cast<double>(masked) * static_cast<double>(P);
    auto out = Tensor<T>::scalar(static_cast<T>(acc / denom));
    if (recording<T>({&pred, &target})) {
        record_op<T>({pred, target}, out, [pred, target, out, mask, denom]() mutable {
            const int64_t BN = pred.dim(0) * pred.dim(1), P = pred.dim(2);
            const T g = out.grad_data()[0] * static_cast<T>(2.0 / denom);
            for (int64_t t = 0; t < BN; ++t) {
                if (!mask[t]) continue;
                const T *p = pred.data() + t * P;
                const T *q = target.data() + t * P;
                if (pred.requires_grad()) {
                    T *gp = pred.grad_data() + t * P;
                    for (int64_t c = 0; c < P; ++c) gp[c] += g * (p[c] - q[c]);
                }
                if (target.requires_grad()) {
                    T *gt = target.grad_data() + t * P;
                    for (int64_t c = 0; c < P; ++c) gt[c] -= g * (p[c] - q[c]);
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> cosine_rows(const Tensor<T> &a, const Tensor<T> &b, T eps_norm, CosineMode mode) {
    check_same_shape(a, b, "cosine_rows");
    if (a.rank() != 2) throw ShapeError("cosine_rows needs rank 2, got " + shape_str(a.shape()));
    const int64_t R = a.dim(0), C = a.dim(1);
    auto out = new_out<T>({R});
    auto norms = std::make_shared<std::vector<T>>(2 * R);  // raw |a_i|, |b_i|
    for (int64_t r = 0; r < R; ++r) {
        const T *ar = a.data() + r * C;
        const T *br = b.data() + r * C;
        const T na = std::sqrt(kernels<T>().dot(ar, ar, C));
        const T nb = std::sqrt(kernels<T>().dot(br, br, C));
        if (mode == CosineMode::Strict && (na <= eps_norm || nb <= eps_norm))
            throw NumericError("cosine_rows: degenerate (near-zero) row norm");
        (*norms)[2 * r] = na;
        (*norms)[2 * r + 1] = nb;
        const T c = kernels<T>().dot(ar, br, C) /
                    (std::max(na, eps_norm) * std::max(nb, eps_norm));
        out.data()[r] = std::clamp(c, T(-1), T(1));
    }
    if (recording<T>({&a, &b})) {
        record_op<T>({a, b}, out, [a, b, out, norms, eps_norm]() mutable {
            const int64_t R = a.dim(0), C = a.dim(1);
            const T *g = out.grad_data();
            const T *cv = out.data();
            for (int64_t r = 0; r < R; ++r) {
                const T *ar = a.data() + r * C;
                const T *br = b.data() + r * C;
                const T na = (*norms)[2 * r], nb = (*norms)[2 * r + 1];
                const T cna = std::max(na, eps_norm), cnb = std::max(nb, eps_norm);
                const T inv_ab = T(1) / (cna * cnb);
                // When a norm is clamped, its factor in the denominator is a
                // constant, so the usual -c*x/|x|^2 term drops out.
                if (a.requires_grad()) {
                    T *ga = a.grad_data() + r * C;
                    const T s = na > eps_norm ? cv[r] / (cna * cna) : T(0);
                    for (int64_t c = 0; c < C; ++c)
                        ga[c] += g[r] * (br[c] * inv_ab - s * ar[c]);
                }
                if (b.requires_grad()) {
                    T *gb = b.grad_data() + r * C;
                    const T s = nb > eps_norm ? cv[r] / (cnb * cnb) : T(0);
                    for (int64_t c = 0; c < C; ++c)
                        gb[c] += g[r] * (ar[c] * inv_ab - s * br[c]);
                }
            }
        });
    }
    return out;
}

// ----------------------------------------------------------- data movement

template <typename T>
Tensor<T> split_heads(const Tensor<T> &x, int heads) {
    if (x.rank() != 3 || x.dim(2) % heads != 0)
        throw ShapeError("split_heads: " + shape_str(x.shape()) + " with H=" + std::to_string(heads));
    const int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2), dh = C / heads;
    auto out = new_out<T>({B * heads, N, dh});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < heads; ++h)
                std::copy_n(x.data() + (b * N + n) * C + h * dh, dh,
                            out.data() + ((b * heads + h) * N + n) * dh);
    if (recording<T>({&x})) {
        record_op<T>({x}, out, [x, out, heads]() mutable {
            const int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2), dh = C / heads;
            const T *g = out.grad_data();
            T *gx = x.grad_data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t h = 0; h < heads; ++h)
                        kernels<T>().axpy(gx + (b * N + n) * C + h * dh, T(1),
                                          g + ((b * heads + h) * N + n) * dh, dh);
        });
    }
    return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T> &x, int heads) {
    if (x.rank() != 3 || x.dim(0) % heads != 0)
        throw ShapeError("merge_heads: " + shape_str(x.shape()) + " with H=" + std::to_string(heads));
    const int64_t B = x.dim(0) / heads, N = x.dim(1), dh = x.dim(2), C = dh * heads;
    auto out = new_out<T>({B, N, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < heads; ++h)
                std::copy_n(x.data() + ((b * heads + h) * N + n) * dh, dh,
                            out.data() + (b * N + n) * C + h * dh);
    if (recording<T>({&x})) {
        record_op<T>({x}, out, [x, out, heads]() mutable {
            const int64_t B = x.dim(0) / heads, N = x.dim(1), dh = x.dim(2), C = dh * heads;
            const T *g = out.grad_data();
            T *gx = x.grad_data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t h = 0; h < heads; ++h)
                        kernels<T>().axpy(gx + ((b * heads + h) * N + n) * dh, T(1),
                                          g + (b * N + n) * C + h * dh, dh);
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_images(const Tensor<T> &x, const std::vector<int> &idx) {
    if (x.rank() < 1) throw ShapeError("gather_images on scalar");
    const int64_t B = x.dim(0);
    const int64_t stride = x.numel() / B;
    for (int i : idx)
        if (i < 0 || i >= B) throw ShapeError("gather_images: index out of range");
    Shape os = x.shape();
    os[0] = static_cast<int64_t>(idx.size());
    auto out = new_out<T>(os);
    for (size_t j = 0; j < idx.size(); ++j)
        std::copy_n(x.data() + idx[j] * stride, stride, out.data() + j * stride);
    if (recording<T>({&x})) {
        record_op<T>({x}, out, [x, out, idx, stride]() mutable {
            const T *g = out.grad_data();
            T *gx = x.grad_data();
            for (size_t j = 0; j < idx.size(); ++j)
                kernels<T>().axpy(gx + idx[j] * stride, T(1), g + j * stride, stride);
        });
    }
    return out;
}

template <typename T>
Tensor<T> scatter_images(const Tensor<T> &y, const std::vector<int> &idx, int64_t extent0) {
    if (y.rank() < 1 || y.dim(0) != static_cast<int64_t>(idx.size()))
        throw ShapeError("scatter_images: leading dim vs index count");
    const int64_t stride = y.numel() / std::max<int64_t>(y.dim(0), 1);
    for (int i : idx)
        if (i < 0 || i >= extent0) throw ShapeError("scatter_images: index out of range");
    Shape os = y.shape();
    os[0] = extent0;
    auto out = new_out<T>(os);
    for (size_t j = 0; j < idx.size(); ++j)
        kernels<T>().axpy(out.data() + idx[j] * stride, T(1), y.data() + j * stride, stride);
    if (recording<T>({&y})) {
        record_op<T>({y}, out, [y, out, idx, stride]() mutable {
            const T *g = out.grad_data();
            T *gy = y.grad_data();
            for (size_t j = 0; j < idx.size(); ++j)
                kernels<T>().axpy(gy + j * stride, T(1), g + idx[j] * stride, stride);
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_tokens(const Tensor<T> &x, const std::vector<std::vector<int>> &idx) {
    if (x.rank() != 3) throw ShapeError("gather_tokens needs [B,N,C], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
    if (static_cast<int64_t>(idx.size()) != B) throw ShapeError("gather_tokens: index rows vs B");
    const size_t Nv = idx.empty() ? 0 : idx[0].size();
    for (const auto &row : idx) {
        if (row.size() != Nv) throw ShapeError("gather_tokens: ragged index rows");
        for (int i : row)
            if (i < 0 || i >= N) throw ShapeError("gather_tokens: token index out of range");
    }
    auto out = new_out<T>({B, static_cast<int64_t>(Nv), C});
    for (int64_t b = 0; b < B; ++b)
        for (size_t j = 0; j < Nv; ++j)
            std::copy_n(x.data() + (b * N + idx[b][j]) * C, C, out.data() + (b * Nv + j) * C);
    if (recording<T>({&x})) {
        record_op<T>({x}, out, [x, out, idx, Nv]() mutable {
            const int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
            const T *g = out.grad_data();
            T *gx = x.grad_data();
            for (int64_t b = 0; b < B; ++b)
                for (size_t j = 0; j < Nv; ++j)
                    kernels<T>().axpy(gx + (b * N + idx[b][j]) * C, T(1), g + (b * Nv + j) * C, C);
        });
    }
    return out;
}

template <typename T>
Tensor<T> assemble_tokens(const Tensor<T> &vis, const std::vector<std::vector<int>> &keep,
                          const Tensor<T> &fill, int64_t total_tokens) {
    if (vis.rank() != 3) throw ShapeError("assemble_tokens needs [B,Nv,C]");
    const int64_t B = vis.dim(0), Nv = vis.dim(1), C = vis.dim(2);
    if (fill.numel() != C) throw ShapeError("assemble_tokens: fill vector vs feature dim");
    if (static_cast<int64_t>(keep.size()) != B) throw ShapeError("assemble_tokens: keep rows vs B");
    for (const auto &row : keep) {
        if (static_cast<int64_t>(row.size()) != Nv) throw ShapeError("assemble_tokens: ragged keep rows");
        for (int i : row)
            if (i < 0 || i >= total_tokens) throw ShapeError("assemble_tokens: index out of range");
    }
    auto out = new_out<T>({B, total_tokens, C});
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t p = 0; p < total_tokens; ++p)
            std::copy_n(fill.data(), C, out.data() + (b * total_tokens + p) * C);
        for (int64_t j = 0; j < Nv; ++j)
            std::copy_n(vis.data() + (b * Nv + j) * C, C,
                        out.data() + (b * total_tokens + keep[b][j]) * C);
    }
    if (recording<T>({&vis, &fill})) {
        record_op<T>({vis, fill}, out, [vis, fill, out, keep, total_tokens]() mutable {
            const int64_t B = vis.dim(0), Nv = vis.dim(1), C = vis.dim(2);
            const T *g = out.grad_data();
            std::vector<uint8_t> kept(static_cast<size_t>(total_tokens));
            for (int64_t b = 0; b < B; ++b) {
                std::fill(kept.begin(), kept.end(), 0);
                for (int64_t j = 0; j < Nv; ++j) {
                    kept[keep[b][j]] = 1;
                    if (vis.requires_grad())
                        kernels<T>().axpy(vis.grad_data() + (b * Nv + j) * C, T(1),
                                          g + (b * total_tokens + keep[b][j]) * C, C);
                }
                if (fill.requires_grad())
                    for (int64_t p = 0; p < total_tokens; ++p)
                        if (!kept[p])
                            kernels<T>().axpy(fill.grad_data(), T(1),
                                              g + (b * total_tokens + p) * C, C);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_cols(const Tensor<T> &s, const std::vector<std::vector<int>> &idx) {
    if (s.rank() != 2) throw ShapeError("gather_cols needs rank 2, got " + shape_str(s.shape()));
    const int64_t B = s.dim(0), R = s.dim(1);
    if (static_cast<int64_t>(idx.size()) != B) throw ShapeError("gather_cols: index rows vs B");
    const size_t K = idx.empty() ? 0 : idx[0].size();
    for (const auto &row : idx) {
        if (row.size() != K) throw ShapeError("gather_cols: ragged index rows");
        for (int i : row)
            if (i < 0 || i >= R) throw ShapeError("gather_cols: column index out of range");
    }
    auto out = new_out<T>({B, static_cast<int64_t>(K)});
    for (int64_t b = 0; b < B; ++b)
        for (size_t k = 0; k < K; ++k) out.data()[b * K + k] = s.data()[b * R + idx[b][k]];
    if (recording<T>({&s})) {
        record_op<T>({s}, out, [s, out, idx, K]() mutable {
            const int64_t B = s.dim(0), R = s.dim(1);
            const T *g = out.grad_data();
            T *gs = s.grad_data();
            for (int64_t b = 0; b < B; ++b)
                for (size_t k = 0; k < K; ++k) gs[b * R + idx[b][k]] += g[b * K + k];
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_flat(const Tensor<T> &x, const std::vector<int64_t> &idx) {
    const int64_t n = x.numel();
    for (int64_t i : idx)
        if (i < 0 || i >= n) throw ShapeError("gather_flat: index out of range");
    auto out = new_out<T>({static_cast<int64_t>(idx.size())});
    for (size_t j = 0; j < idx.size(); ++j) out.data()[j] = x.data()[idx[j]];
    if (recording<T>({&x})) {
        record_op<T>({x}, out, [x, out, idx]() mutable {
            const T *g = out.grad_data();
            T *gx = x.grad_data();
            for (size_t j = 0; j < idx.size(); ++j) gx[idx[j]] += g[j];
        });
    }
    return out;
}

// ----------------------------------------------------------- instantiation

#define DEX_INSTANTIATE_OPS(T)                                                                     \
    template Tensor<T> matmul(const Tensor<T> &, const Tensor<T> &);                               \
    template Tensor<T> bmm(const Tensor<T> &, const Tensor<T> &);                                  \
    template Tensor<T> bmm_nt(const Tensor<T> &, const Tensor<T> &);                               \
    template Tensor<T> add(const Tensor<T> &, const Tensor<T> &);                                  \
    template Tensor<T> sub(const Tensor<T> &, const Tensor<T> &);                                  \
    template Tensor<T> mul(const Tensor<T> &, const Tensor<T> &);                                  \
    template Tensor<T> scale(const Tensor<T> &, T);                                                \
    template Tensor<T> affine(const Tensor<T> &, T, T);                                            \
    template Tensor<T> gelu(const Tensor<T> &);                                                    \
    template Tensor<T> add_rows(const Tensor<T> &, const Tensor<T> &);                             \
    template Tensor<T> mul_cols(const Tensor<T> &, const Tensor<T> &);                             \
    template Tensor<T> add_bcast0(const Tensor<T> &, const Tensor<T> &);                           \
    template Tensor<T> scale_rows(const Tensor<T> &, const Tensor<T> &);                           \
    template Tensor<T> layer_norm(const Tensor<T> &, const Tensor<T> &, const Tensor<T> &, T);     \
    template Tensor<T> softmax(const Tensor<T> &, int);                                            \
    template Tensor<T> normalize_rows(const Tensor<T> &);                                          \
    template Tensor<T> sum(const Tensor<T> &);                                                     \
    template Tensor<T> mean(const Tensor<T> &);                                                    \
    template Tensor<T> mean_tokens(const Tensor<T> &);                                             \
    template Tensor<T> mse(const Tensor<T> &, const Tensor<T> &);                                  \
    template Tensor<T> masked_mse(const Tensor<T> &, const Tensor<T> &,                            \
                                  const std::vector<uint8_t> &);                                   \
    template Tensor<T> cosine_rows(const Tensor<T> &, const Tensor<T> &, T, CosineMode);           \
    template Tensor<T> split_heads(const Tensor<T> &, int);                                        \
    template Tensor<T> merge_heads(const Tensor<T> &, int);                                        \
    template Tensor<T> gather_images(const Tensor<T> &, const std::vector<int> &);                 \
    template Tensor<T> scatter_images(const Tensor<T> &, const std::vector<int> &, int64_t);       \
    template Tensor<T> gather_tokens(const Tensor<T> &, const std::vector<std::vector<int>> &);    \
    template Tensor<T> assemble_tokens(const Tensor<T> &, const std::vector<std::vector<int>> &,   \
                                       const Tensor<T> &, int64_t);                                \
    template Tensor<T> gather_cols(const Tensor<T> &, const std::vector<std::vector<int>> &);      \
    template Tensor<T> gather_flat(const Tensor<T> &, const std::vector<int64_t> &);

DEX_INSTANTIATE_OPS(float)
DEX_INSTANTIATE_OPS(double)

#undef DEX_INSTANTIATE_OPS

}  // namespace dex
