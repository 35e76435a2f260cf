#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dex/block.hpp"

namespace dex {

struct NetworkConfig {
    int image_size = 32;
    int patch_size = 8;
    int channels = 1;
    int embed_dim = 32;   // C
    int depth = 2;        // L
    int heads = 4;
    int experts = 8;      // R
    int top_k = 2;        // K
    int decoder_dim = 16;
    int decoder_depth = 2;
    int decoder_heads = 4;
    double mask_ratio = 0.75;

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    void validate() const;  // throws ConfigError
};

// Loss mixing weights plus the layer factors alpha^l = 1/(L-(l-1)).
struct LossWeights {
    double lambda_co = 0.1;
    double lambda_bal = 0.01;
    std::vector<double> alpha;

    static LossWeights make(int depth, double lambda_co, double lambda_bal);
};

std::vector<double> layer_factors(int depth);

// Fixed 2D sine-cosine position table, [grid*grid, dim] row-major.
std::vector<double> sincos_pos_embed_2d(int grid, int dim);

template <typename T>
struct PlainBlock {  // decoder transformer block, no expert machinery
    LayerNormParams<T> ln1, ln2;
    AttentionLayer<T> attn;
    FeedForward<T> mlp;
};

template <typename T>
struct DexNet {
    NetworkConfig cfg;
    LinearLayer<T> patch_proj;     // [P, C]
    Tensor<T> pos_embed;           // [N, C] fixed
    std::vector<DexBlock<T>> blocks;

    LinearLayer<T> dec_embed;      // [C, Cd]
    Tensor<T> mask_token;          // [Cd], trainable
    Tensor<T> dec_pos_embed;       // [N, Cd] fixed
    std::vector<PlainBlock<T>> dec_blocks;
    LayerNormParams<T> dec_norm;
    LinearLayer<T> dec_pred;       // [Cd, P]
};

template <typename T>
DexNet<T> make_dex_net(const NetworkConfig &cfg, Rng &rng);

// Gradient-trainable parameters in a fixed order (director params excluded:
// they are written only by the grouped EMA).
template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> *tensor;
};
template <typename T>
std::vector<NamedParam<T>> trainable_params(DexNet<T> &net);
// Director parameters, named, for checkpointing and the zero-grad contract.
template <typename T>
std::vector<NamedParam<T>> director_params(DexNet<T> &net);

// Raw pixels for one batch, row-major [B, channels, H, W].
template <typename T>
struct PixelBatch {
    std::vector<T> pixels;
    int64_t count = 0;
};

// Per-image random token masking: keep indices ascending, `masked` flags in
// [B*N] order. floor(mask_ratio*N) tokens are masked.
struct MaskPlan {
    std::vector<std::vector<int>> keep;
    std::vector<uint8_t> masked;
    int n_visible = 0;
};
MaskPlan sample_mask(int batch, int tokens, double mask_ratio, Rng &rng);

// Flattened p*p*ch patches in token order, [B*N, P].
template <typename T>
std::vector<T> patchify(const NetworkConfig &cfg, const std::vector<T> &pixels, int64_t batch);

// Linear patch projection plus fixed positional table -> [B,N,C].
template <typename T>
Tensor<T> patch_embed(DexNet<T> &net, const PixelBatch<T> &batch);

template <typename T>
struct EncodeOptions {
    bool training = false;
    Rng *rng = nullptr;
    const std::vector<std::vector<std::vector<int>>> *pinned_routing = nullptr;  // [L][B][K]
    bool detach_director = true;
};

template <typename T>
struct EncodeResult {
    Tensor<T> features;                    // [B, Nv, C] (or [B,N,C] when unmasked)
    std::vector<RoutingDecision<T>> routing;
    std::vector<Tensor<T>> align;          // per-layer scalars
    std::vector<Tensor<T>> balance;        // per-layer scalars
};

template <typename T>
EncodeResult<T> encode(DexNet<T> &net, const Tensor<T> &tokens, const EncodeOptions<T> &opts);

// Decoder pass over visible features -> per-token patch predictions [B,N,P].
template <typename T>
Tensor<T> decode_predictions(DexNet<T> &net, const Tensor<T> &features, const MaskPlan &plan);

// MSE against raw pixel patches, masked positions only.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T> &pred, const Tensor<T> &target_patches,
                              const MaskPlan &plan);

// L = (lambda_co/L) * sum_l alpha_l * co_l + (lambda_bal/L) * sum_l bal_l + self.
template <typename T>
Tensor<T> total_loss(const Tensor<T> &loss_self, const std::vector<Tensor<T>> &loss_co,
                     const std::vector<Tensor<T>> &loss_bal, const LossWeights &weights);

template <typename T>
struct ForwardResult {
    Tensor<T> loss_total;
    Tensor<T> loss_self;
    std::vector<Tensor<T>> loss_co;
    std::vector<Tensor<T>> loss_bal;
    std::vector<RoutingDecision<T>> routing;
};

// Full pretraining objective on one pixel batch: embed, mask, encode,
// decode, reconstruct, combine.
template <typename T>
ForwardResult<T> pretrain_forward(DexNet<T> &net, const PixelBatch<T> &batch, const MaskPlan &plan,
                                  const LossWeights &weights, const EncodeOptions<T> &opts);

// Eval-mode features for probing: full (unmasked) token set through the
// encoder, mean-pooled over tokens -> [B, C].
template <typename T>
Tensor<T> pooled_features(DexNet<T> &net, const PixelBatch<T> &batch);

}  // namespace dex
