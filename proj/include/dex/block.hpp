#pragma once

#include <optional>
#include <vector>

#include "dex/ops.hpp"
#include "dex/rng.hpp"
#include "dex/tensor.hpp"

// One gated expert module: an expert pool routed per image from a pooled
// global feature, a director of identical shape updated only by a grouped
// EMA of the experts, a cosine alignment loss against the detached director
// output, and a load-balance loss over the routing scores.

namespace dex {

template <typename T>
struct LinearLayer {
    Tensor<T> w;  // [Cin, Cout]
    Tensor<T> b;  // [Cout]
};

// Two-layer transform C -> hidden -> C with GELU. Used for experts, the
// director and the plain decoder MLPs.
template <typename T>
struct FeedForward {
    LinearLayer<T> fc1;
    LinearLayer<T> fc2;
};

// y[..., Cout] = x[..., Cin] * w + b
template <typename T>
Tensor<T> linear(const LinearLayer<T> &l, const Tensor<T> &x);

template <typename T>
FeedForward<T> make_feed_forward(int64_t dim, int64_t hidden, Rng &rng, T init_std,
                                 bool trainable);
template <typename T>
Tensor<T> ff_forward(const FeedForward<T> &ff, const Tensor<T> &x);
// Flat list of the four parameter tensors (fc1.w, fc1.b, fc2.w, fc2.b).
template <typename T>
std::vector<Tensor<T> *> ff_params(FeedForward<T> &ff);

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma;
    Tensor<T> beta;
};

template <typename T>
struct AttentionLayer {
    LinearLayer<T> q, k, v, o;
    int heads = 1;
};

template <typename T>
Tensor<T> attention_forward(const AttentionLayer<T> &at, const Tensor<T> &x);

// Gate state: the trainable routing projection plus the non-trainable
// long-term activation frequencies driving the adaptive noise.
template <typename T>
struct GateState {
    Tensor<T> pi;       // [C, R], trainable
    std::vector<T> c;   // length R, activation-frequency EMA (not trainable)
    T sigma = T(1);     // current noise std, driven by the schedule
    T mu = T(0.99);     // frequency-EMA momentum
    T epsilon = T(1e-8);
    int K = 1;
    int R = 1;
};

template <typename T>
struct Director {
    FeedForward<T> net;  // same shape as one expert; updated only by the EMA
    T momentum = T(0.99);
};

template <typename T>
struct RoutingDecision {
    Tensor<T> scores;                     // [B, R] post-softmax (noisy in training)
    std::vector<std::vector<int>> topk;   // [B][K], sorted by score desc, index asc on ties
    Tensor<T> weights;                    // [B, K] renormalized
    std::vector<T> indicator;             // [B*R] hard assignment, 0/1
};

template <typename T>
struct DexBlock {
    LayerNormParams<T> ln1, ln2;
    AttentionLayer<T> attn;
    GateState<T> gate;
    std::vector<FeedForward<T>> experts;
    Director<T> director;
};

template <typename T>
struct BlockForwardOptions {
    bool training = false;
    Rng *rng = nullptr;  // needed when training with sigma > 0
    const std::vector<std::vector<int>> *pinned_topk = nullptr;  // freeze selection
    bool detach_director = true;  // test hook; production path always detaches
};

template <typename T>
struct BlockOutput {
    Tensor<T> tokens;      // [B, N, C]
    RoutingDecision<T> routing;
    Tensor<T> align_loss;  // scalar
    Tensor<T> balance_loss;  // scalar
};

// Mean over the token axis: [B,N,C] -> [B,C].
template <typename T>
Tensor<T> global_feature(const Tensor<T> &tokens);

// Per-expert competitiveness boost: delta_r = 1 - c_r / (sum c + eps).
template <typename T>
std::vector<T> frequency_boost(const GateState<T> &gate);

// Routing scores [B,R]. Training mode perturbs the logits with
// sigma * (gauss + delta_r) before the softmax; eval mode is noise-free.
template <typename T>
Tensor<T> gate_scores(const Tensor<T> &f, const GateState<T> &gate, bool training, Rng *rng);

// Pick the K highest scores per image (ties: lowest index) and renormalize
// them; `pinned` overrides the selection while keeping weights differentiable.
template <typename T>
RoutingDecision<T> select_top_k(const Tensor<T> &scores, int K,
                                const std::vector<std::vector<int>> *pinned = nullptr);

// Weighted sum of the activated experts per image. Gradients reach the
// activated experts and, through the weights, the gate projection.
template <typename T>
Tensor<T> expert_forward(const Tensor<T> &tokens, std::vector<FeedForward<T>> &experts,
                         const RoutingDecision<T> &routing);

template <typename T>
Tensor<T> director_forward(const Tensor<T> &tokens, const Director<T> &director,
                           bool detach = true);

// Mean over (image, token) of 1 - cos(expert row, director row). Range [0,2].
template <typename T>
Tensor<T> alignment_loss(const Tensor<T> &fE, const Tensor<T> &fD, T eps_norm = T(1e-8));

// R * sum_r (mean_b s_br) * (mean_b I_br).
template <typename T>
Tensor<T> balance_loss(const RoutingDecision<T> &routing);

// Batch contribution weights: Omega_r = sum_b w_br / sum_{r'} sum_b w_br'.
template <typename T>
std::vector<T> contribution_weights(const RoutingDecision<T> &routing);

// eta <- m*eta + (1-m) * sum_r Omega_r * theta_r, value-level (no tape).
template <typename T>
void gema_update(std::vector<FeedForward<T>> &experts, Director<T> &director,
                 std::span<const T> omega, T m);

// c_hat from the batch weights, then c <- mu*c + (1-mu)*c_hat.
template <typename T>
void update_frequency_ema(GateState<T> &gate, const RoutingDecision<T> &routing);

// Full block: x += attn(ln1(x)); h = ln2(x); route on pooled h; expert and
// director paths on h; losses on (fE, detached fD); out = x + fE.
template <typename T>
BlockOutput<T> dex_block_forward(DexBlock<T> &block, const Tensor<T> &x,
                                 const BlockForwardOptions<T> &opts);

}  // namespace dex
