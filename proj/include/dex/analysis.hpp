#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dex/train.hpp"

namespace dex {

// ----------------------------------------------------------- gradcheck ---

struct GradcheckOptions {
    double h = 1e-4;            // central-difference step
    int min_samples = 200;      // parameter coordinates to probe, spread over all tensors
    uint64_t seed = 1234;       // mask + coordinate sampling
    double lambda_co = 0.1;
    double lambda_bal = 0.01;
    double median_tol = 1e-6;
    double max_tol = 1e-4;
    bool detach_director = true;  // test hook for the zero-grad contract
};

struct GradcheckEntry {
    std::string name;
    int64_t index = 0;
    double analytic = 0, numeric = 0, rel_err = 0;
};

struct GradcheckReport {
    double median_rel_err = 0;
    double max_rel_err = 0;
    int checked = 0;
    bool directors_zero = true;   // hard requirement
    double director_max_abs_grad = 0;
    GradcheckEntry worst;
    bool passed = false;

    nlohmann::json to_json() const;
};

// Runs on the 64-bit instantiation only: noise is forced off, routing and
// masking are pinned from the unperturbed forward so finite differences stay
// inside one smooth piece of the loss.
GradcheckReport gradcheck(DexNet<double> &net, const PixelBatch<double> &batch,
                          const GradcheckOptions &opts = {});

// --------------------------------------------------------- FLOP counter ---

enum class RoutingMode { ImageWise, TokenWise };

// Exact mul-add tallies from closed forms; pure function of its arguments.
struct FlopReport {
    int64_t tokens = 0, channels = 0, experts = 0, batch = 0, top_k = 0;
    RoutingMode mode = RoutingMode::ImageWise;
    int64_t gate_pool_image = 0;   // B*N*C   (global average pooling)
    int64_t gate_proj_image = 0;   // B*C*R   (one projection per image)
    int64_t gate_proj_token = 0;   // B*N*C*R (one projection per token)
    int64_t gate_total_image = 0;  // pool + image projection
    int64_t gate_total_token = 0;  // token projection
    int64_t expert_flops = 0;      // B*N*K*8*C^2 (two C<->4C layers)
    int64_t attention_flops = 0;   // 4*B*N*C^2 + 2*B*N^2*C

    int64_t gate_total() const {
        return mode == RoutingMode::ImageWise ? gate_total_image : gate_total_token;
    }
    int64_t total_overhead() const { return gate_total() + expert_flops; }
    nlohmann::json to_json() const;
};

FlopReport count_routing_flops(int64_t tokens, int64_t channels, int64_t experts, int64_t batch,
                               int64_t top_k, RoutingMode mode);

// ----------------------------------------------- activation histograms ---

struct ActivationHistograms {
    int layers = 0, modalities = 0, experts = 0;
    std::vector<double> mass;      // [layer][modality][expert], normalized per (layer, modality)
    std::vector<int64_t> counts;   // samples per modality

    double at(int layer, int modality, int expert) const {
        return mass[(static_cast<size_t>(layer) * modalities + modality) * experts + expert];
    }
    std::span<const double> row(int layer, int modality) const {
        return {mass.data() + (static_cast<size_t>(layer) * modalities + modality) * experts,
                static_cast<size_t>(experts)};
    }
    nlohmann::json to_json() const;
    void write_csv(const std::string &path) const;  // layer,modality,expert,mass
};

// Accumulates routing weight mass per (layer, modality, expert) over eval
// forward passes; rows are normalized to unit mass where samples exist.
template <typename T>
ActivationHistograms activation_histograms(DexNet<T> &net, const ModalityMixture &mix,
                                           int n_samples, Rng &rng, int batch_size = 64);

// Base-2 Jensen-Shannon divergence; symmetric, bounded by 1 bit.
double jensen_shannon_bits(std::span<const double> p, std::span<const double> q);

// Mean over modality pairs (both present in the sample) at one layer.
double mean_pairwise_jsd(const ActivationHistograms &hist, int layer);

// -------------------------------------------------------- linear probe ---

struct ProbeResult {
    double accuracy = 0;
    int classes = 0;
    int train_count = 0, test_count = 0;
    double l2_used = 0;
    bool regularizer_raised = false;
    nlohmann::json to_json() const;
};

// One-vs-rest ridge regression (closed form, Cholesky) on frozen features;
// the leading train_frac of the rows train, the rest score. A singular
// system raises l2 internally and warns.
ProbeResult linear_probe(const std::vector<std::vector<double>> &features,
                         const std::vector<int> &labels, double l2_reg,
                         double train_frac = 0.8);

// Frozen mean-pooled encoder features with semantic or modality labels.
template <typename T>
void probe_dataset(DexNet<T> &net, const ModalityMixture &mix, int n_samples, Rng &rng,
                   std::vector<std::vector<double>> &features, std::vector<int> &semantic,
                   std::vector<int> &modality, int batch_size = 64);

// Raw flattened pixels as features (generator-level baseline).
void pixel_probe_dataset(const ModalityMixture &mix, int n_samples, Rng &rng,
                         std::vector<std::vector<double>> &features, std::vector<int> &semantic,
                         std::vector<int> &modality);

}  // namespace dex
