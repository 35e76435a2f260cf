#include "dex/block.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dex/kernels.hpp"

namespace dex {

// ------------------------------------------------------------ feed-forward

template <typename T>
FeedForward<T> make_feed_forward(int64_t dim, int64_t hidden, Rng &rng, T init_std,
                                 bool trainable) {
    FeedForward<T> ff;
    ff.fc1.w = Tensor<T>::randn({dim, hidden}, rng, init_std, trainable);
    ff.fc1.b = Tensor<T>::zeros({hidden}, trainable);
    ff.fc2.w = Tensor<T>::randn({hidden, dim}, rng, init_std, trainable);
    ff.fc2.b = Tensor<T>::zeros({dim}, trainable);
    return ff;
}

template <typename T>
Tensor<T> linear(const LinearLayer<T> &l, const Tensor<T> &x) {
    const int64_t cin = l.w.dim(0), cout = l.w.dim(1);
    Shape out_shape = x.shape();
    out_shape.back() = cout;
    auto x2 = x.reshape({x.numel() / cin, cin});
    return add_rows(matmul(x2, l.w), l.b).reshape(std::move(out_shape));
}

template <typename T>
Tensor<T> ff_forward(const FeedForward<T> &ff, const Tensor<T> &x) {
    return linear(ff.fc2, gelu(linear(ff.fc1, x)));
}

template <typename T>
std::vector<Tensor<T> *> ff_params(FeedForward<T> &ff) {
    return {&ff.fc1.w, &ff.fc1.b, &ff.fc2.w, &ff.fc2.b};
}

// --------------------------------------------------------------- attention

template <typename T>
Tensor<T> attention_forward(const AttentionLayer<T> &at, const Tensor<T> &x) {
    if (x.rank() != 3) throw ShapeError("attention needs [B,N,C], got " + shape_str(x.shape()));
    const int64_t C = x.dim(2);
    const int64_t dh = C / at.heads;
    auto q = split_heads(linear(at.q, x), at.heads);
    auto k = split_heads(linear(at.k, x), at.heads);
    auto v = split_heads(linear(at.v, x), at.heads);
    auto scores = scale(bmm_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto probs = softmax(scores, -1);
    auto ctx = merge_heads(bmm(probs, v), at.heads);
    return linear(at.o, ctx);
}

// ----------------------------------------------------------------- routing

template <typename T>
Tensor<T> global_feature(const Tensor<T> &tokens) {
    return mean_tokens(tokens);
}

template <typename T>
std::vector<T> frequency_boost(const GateState<T> &gate) {
    T total = T(0);
    for (T v : gate.c) total += v;
    std::vector<T> delta(gate.c.size());
    for (size_t r = 0; r < gate.c.size(); ++r)
        delta[r] = T(1) - gate.c[r] / (total + gate.epsilon);
    return delta;
}

template <typename T>
Tensor<T> gate_scores(const Tensor<T> &f, const GateState<T> &gate, bool training, Rng *rng) {
    if (f.rank() != 2 || f.dim(1) != gate.pi.dim(0))
        throw ShapeError("gate_scores: feature " + shape_str(f.shape()) + " vs pi " +
                         shape_str(gate.pi.shape()));
    auto logits = matmul(f, gate.pi);  // [B, R]
    if (training && gate.sigma > T(0)) {
        if (rng == nullptr) throw ContractError("gate_scores: training noise needs an rng");
        const auto delta = frequency_boost(gate);
        const int64_t B = logits.dim(0), R = logits.dim(1);
        auto noise = Tensor<T>::zeros({B, R});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t r = 0; r < R; ++r)
                noise.data()[b * R + r] =
                    gate.sigma * (static_cast<T>(rng->normal()) + delta[r]);
        logits = add(logits, noise);
    }
    return softmax(logits, -1);
}

template <typename T>
RoutingDecision<T> select_top_k(const Tensor<T> &scores, int K,
                                const std::vector<std::vector<int>> *pinned) {
    if (scores.rank() != 2) throw ShapeError("select_top_k needs [B,R]");
    const int64_t B = scores.dim(0), R = scores.dim(1);
    if (K < 1 || K > R) throw ContractError("select_top_k: K out of range");

    RoutingDecision<T> rd;
    rd.scores = scores;
    rd.topk.resize(B);
    rd.indicator.assign(B * R, T(0));
    if (pinned) {
        if (static_cast<int64_t>(pinned->size()) != B) throw ShapeError("pinned routing vs batch");
        rd.topk = *pinned;
    } else {
        std::vector<int> order(R);
        for (int64_t b = 0; b < B; ++b) {
            const T *row = scores.data() + b * R;
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [row](int i, int j) { return row[i] > row[j]; });
            rd.topk[b].assign(order.begin(), order.begin() + K);
        }
    }
    for (int64_t b = 0; b < B; ++b)
        for (int r : rd.topk[b]) rd.indicator[b * R + r] = T(1);

    rd.weights = normalize_rows(gather_cols(scores, rd.topk));
    return rd;
}

template <typename T>
Tensor<T> expert_forward(const Tensor<T> &tokens, std::vector<FeedForward<T>> &experts,
                         const RoutingDecision<T> &routing) {
    const int64_t B = tokens.dim(0);
    const int R = static_cast<int>(experts.size());
    const int64_t K = routing.weights.dim(1);
    auto out = Tensor<T>::zeros(tokens.shape());
    for (int r = 0; r < R; ++r) {
        std::vector<int> sel;
        std::vector<int64_t> wpos;  // flat index into weights for (b, slot of r)
        for (int64_t b = 0; b < B; ++b) {
            const auto &tk = routing.topk[b];
            for (int64_t k = 0; k < static_cast<int64_t>(tk.size()); ++k)
                if (tk[k] == r) {
                    sel.push_back(static_cast<int>(b));
                    wpos.push_back(b * K + k);
                    break;
                }
        }
        if (sel.empty()) continue;
        auto xr = gather_images(tokens, sel);
        auto yr = ff_forward(experts[r], xr);
        auto wr = gather_flat(routing.weights, wpos);
        out = add(out, scatter_images(scale_rows(yr, wr), sel, B));
    }
    return out;
}

template <typename T>
Tensor<T> director_forward(const Tensor<T> &tokens, const Director<T> &director, bool detach) {
    auto y = ff_forward(director.net, tokens);
    return detach ? y.detach() : y;
}

// -------------------------------------------------------------------- loss

template <typename T>
Tensor<T> alignment_loss(const Tensor<T> &fE, const Tensor<T> &fD, T eps_norm) {
    if (fE.shape() != fD.shape())
        throw ShapeError("alignment_loss: " + shape_str(fE.shape()) + " vs " + shape_str(fD.shape()));
    const int64_t C = fE.dim(fE.rank() - 1);
    const int64_t rows = fE.numel() / C;
    auto cs = cosine_rows(fE.reshape({rows, C}), fD.reshape({rows, C}), eps_norm);
    return affine(mean(cs), T(-1), T(1));  // 1 - mean cos
}

template <typename T>
Tensor<T> balance_loss(const RoutingDecision<T> &routing) {
    const int64_t B = routing.scores.dim(0), R = routing.scores.dim(1);
    if (B < 1) throw ContractError("balance_loss: empty batch");
    // R * sum_r P_r * F_r  ==  (R/B) * sum_{b,r} s_br * F_r  with F constant.
    auto freq = Tensor<T>::zeros({R});
    for (int64_t r = 0; r < R; ++r) {
        T acc = T(0);
        for (int64_t b = 0; b < B; ++b) acc += routing.indicator[b * R + r];
        freq.data()[r] = acc / static_cast<T>(B);
    }
    return scale(sum(mul_cols(routing.scores, freq)), static_cast<T>(R) / static_cast<T>(B));
}

template <typename T>
std::vector<T> contribution_weights(const RoutingDecision<T> &routing) {
    const int64_t B = routing.scores.dim(0), R = routing.scores.dim(1);
    const int64_t K = routing.weights.dim(1);
    std::vector<T> omega(R, T(0));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t k = 0; k < K; ++k)
            omega[routing.topk[b][k]] += routing.weights.data()[b * K + k];
    T total = T(0);
    for (T v : omega) total += v;
    if (!(total > T(0))) throw ContractError("contribution_weights: no activated expert in batch");
    for (T &v : omega) v /= total;
    return omega;
}

template <typename T>
void gema_update(std::vector<FeedForward<T>> &experts, Director<T> &director,
                 std::span<const T> omega, T m) {
    if (omega.size() != experts.size())
        throw ContractError("gema_update: omega size vs expert count");
    auto dir_params = ff_params(director.net);
    for (size_t p = 0; p < dir_params.size(); ++p) {
        Tensor<T> &eta = *dir_params[p];
        const size_t n = eta.numel();
        std::vector<T> mix(n, T(0));
        for (size_t r = 0; r < experts.size(); ++r) {
            Tensor<T> &theta = *ff_params(experts[r])[p];
            if (theta.shape() != eta.shape())
                throw ContractError("gema_update: expert/director shape mismatch at param " +
                                    std::to_string(p));
            if (omega[r] != T(0)) kernels<T>().axpy(mix.data(), omega[r], theta.data(), n);
        }
        if (m == T(1)) continue;  // bitwise fixed point
        T *e = eta.data();
        kernels<T>().scale(e, e, m, n);
        kernels<T>().axpy(e, T(1) - m, mix.data(), n);
    }
}

template <typename T>
void update_frequency_ema(GateState<T> &gate, const RoutingDecision<T> &routing) {
    const int64_t B = routing.scores.dim(0), R = routing.scores.dim(1);
    const int64_t K = routing.weights.dim(1);
    std::vector<T> chat(R, T(0));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t k = 0; k < K; ++k)
            chat[routing.topk[b][k]] += routing.weights.data()[b * K + k];
    T total = T(0);
    for (T v : chat) total += v;
    for (T &v : chat) v /= (total + gate.epsilon);
    for (int64_t r = 0; r < R; ++r)
        gate.c[r] = gate.mu * gate.c[r] + (T(1) - gate.mu) * chat[r];
}

// ------------------------------------------------------------------- block

template <typename T>
BlockOutput<T> dex_block_forward(DexBlock<T> &block, const Tensor<T> &x,
                                 const BlockForwardOptions<T> &opts) {
    auto attn_in = layer_norm(x, block.ln1.gamma, block.ln1.beta);
    auto x1 = add(x, attention_forward(block.attn, attn_in));
    auto h = layer_norm(x1, block.ln2.gamma, block.ln2.beta);

    auto f = global_feature(h);
    auto scores = gate_scores(f, block.gate, opts.training, opts.rng);

    BlockOutput<T> out;
    out.routing = select_top_k(scores, block.gate.K, opts.pinned_topk);
    auto fE = expert_forward(h, block.experts, out.routing);
    auto fD = director_forward(h, block.director, opts.detach_director);
    out.align_loss = alignment_loss(fE, fD);
    out.balance_loss = balance_loss(out.routing);
    out.tokens = add(x1, fE);
    return out;
}

// ----------------------------------------------------------- instantiation

#define DEX_INSTANTIATE_BLOCK(T)                                                                  \
    template FeedForward<T> make_feed_forward(int64_t, int64_t, Rng &, T, bool);                  \
    template Tensor<T> linear(const LinearLayer<T> &, const Tensor<T> &);                         \
    template Tensor<T> ff_forward(const FeedForward<T> &, const Tensor<T> &);                     \
    template std::vector<Tensor<T> *> ff_params(FeedForward<T> &);                                \
    template Tensor<T> attention_forward(const AttentionLayer<T> &, const Tensor<T> &);           \
    template Tensor<T> global_feature(const Tensor<T> &);                                         \
    template std::vector<T> frequency_boost(const GateState<T> &);                                \
    template Tensor<T> gate_scores(const Tensor<T> &, const GateState<T> &, bool, Rng *);         \
    template RoutingDecision<T> select_top_k(const Tensor<T> &, int,                              \
                                             const std::vector<std::vector<int>> *);              \
    template Tensor<T> expert_forward(const Tensor<T> &, std::vector<FeedForward<T>> &,           \
                                      const RoutingDecision<T> &);                                \
    template Tensor<T> director_forward(const Tensor<T> &, const Director<T> &, bool);            \
    template Tensor<T> alignment_loss(const Tensor<T> &, const Tensor<T> &, T);                   \
    template Tensor<T> balance_loss(const RoutingDecision<T> &);                                  \
    template std::vector<T> contribution_weights(const RoutingDecision<T> &);                     \
    template void gema_update(std::vector<FeedForward<T>> &, Director<T> &, std::span<const T>,   \
                              T);                                                                 \
    template void update_frequency_ema(GateState<T> &, const RoutingDecision<T> &);               \
    template BlockOutput<T> dex_block_forward(DexBlock<T> &, const Tensor<T> &,                   \
                                              const BlockForwardOptions<T> &);

DEX_INSTANTIATE_BLOCK(float)
DEX_INSTANTIATE_BLOCK(double)

#undef DEX_INSTANTIATE_BLOCK

}  // namespace dex
