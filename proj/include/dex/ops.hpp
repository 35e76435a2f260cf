#pragma once

#include <vector>

#include "dex/tensor.hpp"

// Differentiable ops over Tensor<T>. Each op computes its value through the
// kernel layer where the loop is data-parallel, and registers a backward
// rule on the active tape when recording. Broadcasting is deliberately
// limited to the trailing-axis row form (add_rows/mul_cols) plus the
// leading-axis forms needed by the model (add_bcast0/scale_rows).

namespace dex {

// -------- linear algebra
template <typename T> Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b);      // [M,K]x[K,N]
template <typename T> Tensor<T> bmm(const Tensor<T> &a, const Tensor<T> &b);         // [G,M,K]x[G,K,N]
template <typename T> Tensor<T> bmm_nt(const Tensor<T> &a, const Tensor<T> &b);      // [G,M,K]x[G,N,K]^T

// -------- elementwise / affine
template <typename T> Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b);
template <typename T> Tensor<T> sub(const Tensor<T> &a, const Tensor<T> &b);
template <typename T> Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b);
template <typename T> Tensor<T> scale(const Tensor<T> &a, T s);
template <typename T> Tensor<T> affine(const Tensor<T> &a, T mul, T add);            // mul*x + add
template <typename T> Tensor<T> gelu(const Tensor<T> &a);                            // exact erf form

// x[...,C] + v[C] / x[...,C] * v[C]
template <typename T> Tensor<T> add_rows(const Tensor<T> &x, const Tensor<T> &v);
template <typename T> Tensor<T> mul_cols(const Tensor<T> &x, const Tensor<T> &v);
// x[B,N,C] + p[N,C] (broadcast over the leading axis)
template <typename T> Tensor<T> add_bcast0(const Tensor<T> &x, const Tensor<T> &p);
// x[B,...] * w[B] (per-leading-index scalar weights)
template <typename T> Tensor<T> scale_rows(const Tensor<T> &x, const Tensor<T> &w);

// -------- normalization / activation over rows
template <typename T>
Tensor<T> layer_norm(const Tensor<T> &x, const Tensor<T> &gamma, const Tensor<T> &beta,
                     T eps = T(1e-5));
// Softmax along `axis` (negative counts from the back). Rejects non-finite
// inputs with NumericError.
template <typename T> Tensor<T> softmax(const Tensor<T> &x, int axis = -1);
// y_i = w_i / sum_j w_j per row (rows must have positive sums).
template <typename T> Tensor<T> normalize_rows(const Tensor<T> &w);

// -------- reductions and losses
template <typename T> Tensor<T> sum(const Tensor<T> &x);                              // scalar
template <typename T> Tensor<T> mean(const Tensor<T> &x);                             // scalar
template <typename T> Tensor<T> mean_tokens(const Tensor<T> &x);                      // [B,N,C]->[B,C]
template <typename T> Tensor<T> mse(const Tensor<T> &pred, const Tensor<T> &target);  // scalar
// Mean over masked tokens of the per-token MSE; mask[b*N+n] != 0 marks a
// masked (scored) token.
template <typename T>
Tensor<T> masked_mse(const Tensor<T> &pred, const Tensor<T> &target,
                     const std::vector<uint8_t> &mask);

enum class CosineMode { Clamp, Strict };
// Row-wise cosine similarity of a[R,C] vs b[R,C] -> [R]. Clamp mode bounds
// each norm below by eps_norm; Strict throws NumericError on a zero norm.
template <typename T>
Tensor<T> cosine_rows(const Tensor<T> &a, const Tensor<T> &b, T eps_norm = T(1e-8),
                      CosineMode mode = CosineMode::Clamp);

// -------- data movement
// [B,N,C] -> [B*H,N,C/H] and back; H must divide C.
template <typename T> Tensor<T> split_heads(const Tensor<T> &x, int heads);
template <typename T> Tensor<T> merge_heads(const Tensor<T> &x, int heads);
// Leading-axis gather/scatter: y[i] = x[idx[i]]; scatter writes rows of y
// into a zero tensor with leading extent `extent0`.
template <typename T> Tensor<T> gather_images(const Tensor<T> &x, const std::vector<int> &idx);
template <typename T>
Tensor<T> scatter_images(const Tensor<T> &y, const std::vector<int> &idx, int64_t extent0);
// Per-image token gather: out[b,j] = x[b, idx[b][j]].
template <typename T>
Tensor<T> gather_tokens(const Tensor<T> &x, const std::vector<std::vector<int>> &idx);
// Rebuild a full-length token sequence from visible tokens: positions
// keep[b][j] take vis[b,j], every other position takes fill[C].
template <typename T>
Tensor<T> assemble_tokens(const Tensor<T> &vis, const std::vector<std::vector<int>> &keep,
                          const Tensor<T> &fill, int64_t total_tokens);
// out[b,k] = s[b, idx[b][k]]
template <typename T>
Tensor<T> gather_cols(const Tensor<T> &s, const std::vector<std::vector<int>> &idx);
// out[i] = x.flat[idx[i]]
template <typename T>
Tensor<T> gather_flat(const Tensor<T> &x, const std::vector<int64_t> &idx);

}  // namespace dex
