#include "dex/model.hpp"

#include <cmath>

namespace dex {

void NetworkConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw ConfigError("image_size must be a positive multiple of patch_size");
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (embed_dim < 4 || embed_dim % 4 != 0)
        throw ConfigError("embed_dim must be a positive multiple of 4 (sincos table)");
    if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
    if (decoder_dim < 4 || decoder_dim % 4 != 0)
        throw ConfigError("decoder_dim must be a positive multiple of 4 (sincos table)");
    if (decoder_dim % decoder_heads != 0)
        throw ConfigError("decoder_dim must be divisible by decoder_heads");
    if (decoder_depth < 1) throw ConfigError("decoder_depth must be >= 1");
    if (experts < 1) throw ConfigError("experts must be >= 1");
    if (top_k < 1 || top_k > experts) throw ConfigError("top_k must be in [1, experts]");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must be in (0,1)");
    const int masked = static_cast<int>(mask_ratio * tokens());
    if (masked < 1 || masked >= tokens())
        throw ConfigError("mask_ratio leaves no masked or no visible tokens");
}

std::vector<double> layer_factors(int depth) {
    std::vector<double> a(depth);
    for (int l = 1; l <= depth; ++l) a[l - 1] = 1.0 / static_cast<double>(depth - (l - 1));
    return a;
}

LossWeights LossWeights::make(int depth, double lambda_co, double lambda_bal) {
    LossWeights w;
    w.lambda_co = lambda_co;
    w.lambda_bal = lambda_bal;
    w.alpha = layer_factors(depth);
    return w;
}

std::vector<double> sincos_pos_embed_2d(int grid, int dim) {
    // Half the channels encode the row coordinate, half the column; each half
    // is split into sin and cos banks with log-spaced frequencies.
    const int half = dim / 2;
    const int quarter = half / 2;
    std::vector<double> table(static_cast<size_t>(grid) * grid * dim);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            double *row = table.data() + (static_cast<size_t>(gy) * grid + gx) * dim;
            for (int i = 0; i < quarter; ++i) {
                const double omega =
                    1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
                row[i] = std::sin(gy * omega);
                row[quarter + i] = std::cos(gy * omega);
                row[half + i] = std::sin(gx * omega);
                row[half + quarter + i] = std::cos(gx * omega);
            }
        }
    return table;
}

namespace {

template <typename T>
LinearLayer<T> make_linear(int64_t cin, int64_t cout, Rng &rng, T init_std) {
    return {Tensor<T>::randn({cin, cout}, rng, init_std, true), Tensor<T>::zeros({cout}, true)};
}

template <typename T>
LayerNormParams<T> make_layer_norm(int64_t dim) {
    return {Tensor<T>::full({dim}, T(1), true), Tensor<T>::zeros({dim}, true)};
}

template <typename T>
AttentionLayer<T> make_attention(int64_t dim, int heads, Rng &rng, T init_std) {
    AttentionLayer<T> at;
    at.q = make_linear<T>(dim, dim, rng, init_std);
    at.k = make_linear<T>(dim, dim, rng, init_std);
    at.v = make_linear<T>(dim, dim, rng, init_std);
    at.o = make_linear<T>(dim, dim, rng, init_std);
    at.heads = heads;
    return at;
}

template <typename T>
Tensor<T> pos_table_tensor(int grid, int dim) {
    const auto table = sincos_pos_embed_2d(grid, dim);
    std::vector<T> v(table.size());
    for (size_t i = 0; i < table.size(); ++i) v[i] = static_cast<T>(table[i]);
    return Tensor<T>::from({static_cast<int64_t>(grid) * grid, dim}, std::move(v));
}

constexpr double kInitStd = 0.02;

}  // namespace

template <typename T>
DexNet<T> make_dex_net(const NetworkConfig &cfg, Rng &rng) {
    cfg.validate();
    const T std = static_cast<T>(kInitStd);
    DexNet<T> net;
    net.cfg = cfg;
    net.patch_proj = make_linear<T>(cfg.patch_dim(), cfg.embed_dim, rng, std);
    net.pos_embed = pos_table_tensor<T>(cfg.grid(), cfg.embed_dim);

    for (int l = 0; l < cfg.depth; ++l) {
        DexBlock<T> blk;
        blk.ln1 = make_layer_norm<T>(cfg.embed_dim);
        blk.ln2 = make_layer_norm<T>(cfg.embed_dim);
        blk.attn = make_attention<T>(cfg.embed_dim, cfg.heads, rng, std);
        blk.gate.pi = Tensor<T>::randn({cfg.embed_dim, cfg.experts}, rng, std, true);
        blk.gate.c.assign(cfg.experts, T(0));
        blk.gate.K = cfg.top_k;
        blk.gate.R = cfg.experts;
        for (int r = 0; r < cfg.experts; ++r)
            blk.experts.push_back(
                make_feed_forward<T>(cfg.embed_dim, 4 * cfg.embed_dim, rng, std, true));
        blk.director.net = make_feed_forward<T>(cfg.embed_dim, 4 * cfg.embed_dim, rng, std, false);
        net.blocks.push_back(std::move(blk));
    }

    net.dec_embed = make_linear<T>(cfg.embed_dim, cfg.decoder_dim, rng, std);
    net.mask_token = Tensor<T>::randn({cfg.decoder_dim}, rng, std, true);
    net.dec_pos_embed = pos_table_tensor<T>(cfg.grid(), cfg.decoder_dim);
    for (int l = 0; l < cfg.decoder_depth; ++l) {
        PlainBlock<T> blk;
        blk.ln1 = make_layer_norm<T>(cfg.decoder_dim);
        blk.ln2 = make_layer_norm<T>(cfg.decoder_dim);
        blk.attn = make_attention<T>(cfg.decoder_dim, cfg.decoder_heads, rng, std);
        blk.mlp = make_feed_forward<T>(cfg.decoder_dim, 4 * cfg.decoder_dim, rng, std, true);
        net.dec_blocks.push_back(std::move(blk));
    }
    net.dec_norm = make_layer_norm<T>(cfg.decoder_dim);
    net.dec_pred = make_linear<T>(cfg.decoder_dim, cfg.patch_dim(), rng, std);
    return net;
}

namespace {

template <typename T>
void push_linear(std::vector<NamedParam<T>> &out, const std::string &name, LinearLayer<T> &l) {
    out.push_back({name + ".w", &l.w});
    out.push_back({name + ".b", &l.b});
}

template <typename T>
void push_ff(std::vector<NamedParam<T>> &out, const std::string &name, FeedForward<T> &ff) {
    push_linear(out, name + ".fc1", ff.fc1);
    push_linear(out, name + ".fc2", ff.fc2);
}

template <typename T>
void push_ln(std::vector<NamedParam<T>> &out, const std::string &name, LayerNormParams<T> &ln) {
    out.push_back({name + ".gamma", &ln.gamma});
    out.push_back({name + ".beta", &ln.beta});
}

template <typename T>
void push_attn(std::vector<NamedParam<T>> &out, const std::string &name, AttentionLayer<T> &at) {
    push_linear(out, name + ".q", at.q);
    push_linear(out, name + ".k", at.k);
    push_linear(out, name + ".v", at.v);
    push_linear(out, name + ".o", at.o);
}

}  // namespace

template <typename T>
std::vector<NamedParam<T>> trainable_params(DexNet<T> &net) {
    std::vector<NamedParam<T>> out;
    push_linear(out, "enc.patch", net.patch_proj);
    for (size_t l = 0; l < net.blocks.size(); ++l) {
        const std::string p = "enc.blk" + std::to_string(l);
        auto &blk = net.blocks[l];
        push_ln(out, p + ".ln1", blk.ln1);
        push_attn(out, p + ".attn", blk.attn);
        push_ln(out, p + ".ln2", blk.ln2);
        out.push_back({p + ".gate.pi", &blk.gate.pi});
        for (size_t r = 0; r < blk.experts.size(); ++r)
            push_ff(out, p + ".expert" + std::to_string(r), blk.experts[r]);
    }
    push_linear(out, "dec.embed", net.dec_embed);
    out.push_back({"dec.mask_token", &net.mask_token});
    for (size_t l = 0; l < net.dec_blocks.size(); ++l) {
        const std::string p = "dec.blk" + std::to_string(l);
        auto &blk = net.dec_blocks[l];
        push_ln(out, p + ".ln1", blk.ln1);
        push_attn(out, p + ".attn", blk.attn);
        push_ln(out, p + ".ln2", blk.ln2);
        push_ff(out, p + ".mlp", blk.mlp);
    }
    push_ln(out, "dec.norm", net.dec_norm);
    push_linear(out, "dec.pred", net.dec_pred);
    return out;
}

template <typename T>
std::vector<NamedParam<T>> director_params(DexNet<T> &net) {
    std::vector<NamedParam<T>> out;
    for (size_t l = 0; l < net.blocks.size(); ++l)
        push_ff(out, "enc.blk" + std::to_string(l) + ".director", net.blocks[l].director.net);
    return out;
}

MaskPlan sample_mask(int batch, int tokens, double mask_ratio, Rng &rng) {
    const int n_masked = static_cast<int>(mask_ratio * tokens);
    if (n_masked < 1 || n_masked >= tokens)
        throw ContractError("mask_ratio leaves no masked or no visible tokens");
    MaskPlan plan;
    plan.n_visible = tokens - n_masked;
    plan.keep.resize(batch);
    plan.masked.assign(static_cast<size_t>(batch) * tokens, 1);
    for (int b = 0; b < batch; ++b) {
        auto perm = rng.permutation(tokens);
        plan.keep[b].assign(perm.begin(), perm.begin() + plan.n_visible);
        std::sort(plan.keep[b].begin(), plan.keep[b].end());
        for (int i : plan.keep[b]) plan.masked[static_cast<size_t>(b) * tokens + i] = 0;
    }
    return plan;
}

template <typename T>
std::vector<T> patchify(const NetworkConfig &cfg, const std::vector<T> &pixels, int64_t batch) {
    const int H = cfg.image_size, W = cfg.image_size, p = cfg.patch_size, ch = cfg.channels;
    const int g = cfg.grid();
    const int64_t P = cfg.patch_dim();
    if (static_cast<int64_t>(pixels.size()) != batch * ch * H * W)
        throw ShapeError("patchify: pixel buffer size mismatch");
    std::vector<T> out(static_cast<size_t>(batch) * cfg.tokens() * P);
    for (int64_t b = 0; b < batch; ++b)
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx) {
                T *dst = out.data() + ((b * cfg.tokens()) + gy * g + gx) * P;
                for (int c = 0; c < ch; ++c)
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            *dst++ = pixels[((b * ch + c) * H + gy * p + py) * W + gx * p + px];
            }
    return out;
}

template <typename T>
Tensor<T> patch_embed(DexNet<T> &net, const PixelBatch<T> &batch) {
    const auto &cfg = net.cfg;
    const int64_t B = batch.count, N = cfg.tokens(), P = cfg.patch_dim();
    auto patches = Tensor<T>::from({B * N, P}, patchify<T>(cfg, batch.pixels, B));
    auto tok = linear(net.patch_proj, patches).reshape({B, N, cfg.embed_dim});
    return add_bcast0(tok, net.pos_embed);
}

template <typename T>
EncodeResult<T> encode(DexNet<T> &net, const Tensor<T> &tokens, const EncodeOptions<T> &opts) {
    EncodeResult<T> res;
    Tensor<T> x = tokens;
    for (size_t l = 0; l < net.blocks.size(); ++l) {
        BlockForwardOptions<T> bo;
        bo.training = opts.training;
        bo.rng = opts.rng;
        bo.detach_director = opts.detach_director;
        if (opts.pinned_routing) bo.pinned_topk = &(*opts.pinned_routing)[l];
        auto out = dex_block_forward(net.blocks[l], x, bo);
        x = out.tokens;
        res.routing.push_back(std::move(out.routing));
        res.align.push_back(std::move(out.align_loss));
        res.balance.push_back(std::move(out.balance_loss));
    }
    res.features = x;
    return res;
}

template <typename T>
Tensor<T> decode_predictions(DexNet<T> &net, const Tensor<T> &features, const MaskPlan &plan) {
    const int64_t N = net.cfg.tokens();
    auto d = linear(net.dec_embed, features);
    auto x = assemble_tokens(d, plan.keep, net.mask_token, N);
    x = add_bcast0(x, net.dec_pos_embed);
    for (auto &blk : net.dec_blocks) {
        x = add(x, attention_forward(blk.attn, layer_norm(x, blk.ln1.gamma, blk.ln1.beta)));
        x = add(x, ff_forward(blk.mlp, layer_norm(x, blk.ln2.gamma, blk.ln2.beta)));
    }
    x = layer_norm(x, net.dec_norm.gamma, net.dec_norm.beta);
    return linear(net.dec_pred, x);
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T> &pred, const Tensor<T> &target_patches,
                              const MaskPlan &plan) {
    return masked_mse(pred, target_patches, plan.masked);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T> &loss_self, const std::vector<Tensor<T>> &loss_co,
                     const std::vector<Tensor<T>> &loss_bal, const LossWeights &weights) {
    const size_t L = weights.alpha.size();
    if (loss_co.size() != L || loss_bal.size() != L)
        throw ShapeError("total_loss: per-layer loss lists must have length depth");
    Tensor<T> co_sum = Tensor<T>::scalar(T(0));
    Tensor<T> bal_sum = Tensor<T>::scalar(T(0));
    for (size_t l = 0; l < L; ++l) {
        co_sum = add(co_sum, scale(loss_co[l], static_cast<T>(weights.alpha[l])));
        bal_sum = add(bal_sum, loss_bal[l]);
    }
    const T co_w = static_cast<T>(weights.lambda_co / static_cast<double>(L));
    const T bal_w = static_cast<T>(weights.lambda_bal / static_cast<double>(L));
    return add(loss_self, add(scale(co_sum, co_w), scale(bal_sum, bal_w)));
}

template <typename T>
ForwardResult<T> pretrain_forward(DexNet<T> &net, const PixelBatch<T> &batch, const MaskPlan &plan,
                                  const LossWeights &weights, const EncodeOptions<T> &opts) {
    const auto &cfg = net.cfg;
    const int64_t B = batch.count, N = cfg.tokens(), P = cfg.patch_dim();
    auto tokens = patch_embed(net, batch);
    auto visible = gather_tokens(tokens, plan.keep);
    auto enc = encode(net, visible, opts);
    auto pred = decode_predictions(net, enc.features, plan);
    auto targets = Tensor<T>::from({B, N, P}, patchify<T>(cfg, batch.pixels, B));

    ForwardResult<T> res;
    res.loss_self = reconstruction_loss(pred, targets, plan);
    res.loss_co = std::move(enc.align);
    res.loss_bal = std::move(enc.balance);
    res.routing = std::move(enc.routing);
    res.loss_total = total_loss(res.loss_self, res.loss_co, res.loss_bal, weights);
    return res;
}

template <typename T>
Tensor<T> pooled_features(DexNet<T> &net, const PixelBatch<T> &batch) {
    auto tokens = patch_embed(net, batch);
    EncodeOptions<T> opts;  // eval: no noise, no masking
    auto enc = encode(net, tokens, opts);
    return mean_tokens(enc.features);
}

// ----------------------------------------------------------- instantiation

#define DEX_INSTANTIATE_MODEL(T)                                                                  \
    template DexNet<T> make_dex_net(const NetworkConfig &, Rng &);                                \
    template std::vector<NamedParam<T>> trainable_params(DexNet<T> &);                            \
    template std::vector<NamedParam<T>> director_params(DexNet<T> &);                             \
    template std::vector<T> patchify(const NetworkConfig &, const std::vector<T> &, int64_t);     \
    template Tensor<T> patch_embed(DexNet<T> &, const PixelBatch<T> &);                           \
    template EncodeResult<T> encode(DexNet<T> &, const Tensor<T> &, const EncodeOptions<T> &);    \
    template Tensor<T> decode_predictions(DexNet<T> &, const Tensor<T> &, const MaskPlan &);      \
    template Tensor<T> reconstruction_loss(const Tensor<T> &, const Tensor<T> &,                  \
                                           const MaskPlan &);                                     \
    template Tensor<T> total_loss(const Tensor<T> &, const std::vector<Tensor<T>> &,              \
                                  const std::vector<Tensor<T>> &, const LossWeights &);           \
    template ForwardResult<T> pretrain_forward(DexNet<T> &, const PixelBatch<T> &,                \
                                               const MaskPlan &, const LossWeights &,             \
                                               const EncodeOptions<T> &);                         \
    template Tensor<T> pooled_features(DexNet<T> &, const PixelBatch<T> &);

DEX_INSTANTIATE_MODEL(float)
DEX_INSTANTIATE_MODEL(double)

#undef DEX_INSTANTIATE_MODEL

}  // namespace dex
