#include "dex/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

namespace dex {

// ---------------------------------------------------------------- gradcheck

nlohmann::json GradcheckReport::to_json() const {
    return {{"median_rel_err", median_rel_err},
            {"max_rel_err", max_rel_err},
            {"checked", checked},
            {"directors_zero", directors_zero},
            {"director_max_abs_grad", director_max_abs_grad},
            {"worst",
             {{"name", worst.name},
              {"index", worst.index},
              {"analytic", worst.analytic},
              {"numeric", worst.numeric},
              {"rel_err", worst.rel_err}}},
            {"passed", passed}};
}

namespace {

double rel_error(double a, double n) {
    const double denom = std::max({std::abs(a), std::abs(n), 1e-6});
    return std::abs(a - n) / denom;
}

}  // namespace

GradcheckReport gradcheck(DexNet<double> &net, const PixelBatch<double> &batch,
                          const GradcheckOptions &opts) {
    Rng rng(opts.seed);
    const auto plan = sample_mask(static_cast<int>(batch.count), net.cfg.tokens(),
                                  net.cfg.mask_ratio, rng);
    const auto weights = LossWeights::make(net.cfg.depth, opts.lambda_co, opts.lambda_bal);
    for (auto &blk : net.blocks) blk.gate.sigma = 0.0;  // noise off

    // Pin the discrete selection from the unperturbed forward so every
    // evaluation below stays inside the same smooth piece.
    std::vector<std::vector<std::vector<int>>> pinned;
    {
        EncodeOptions<double> probe;
        probe.detach_director = opts.detach_director;
        auto fwd = pretrain_forward(net, batch, plan, weights, probe);
        for (const auto &r : fwd.routing) pinned.push_back(r.topk);
    }
    EncodeOptions<double> eopts;
    eopts.pinned_routing = &pinned;
    eopts.detach_director = opts.detach_director;

    auto loss_value = [&]() {
        return pretrain_forward(net, batch, plan, weights, eopts).loss_total.item();
    };

    auto params = trainable_params(net);
    for (auto &np : params) np.tensor->zero_grad();
    for (auto &np : director_params(net)) np.tensor->zero_grad();
    {
        Tape<double> tape;
        auto fwd = pretrain_forward(net, batch, plan, weights, eopts);
        tape.backward(fwd.loss_total);
    }

    GradcheckReport report;
    for (auto &np : director_params(net)) {
        if (!np.tensor->has_grad()) continue;
        for (double g : np.tensor->grad())
            report.director_max_abs_grad = std::max(report.director_max_abs_grad, std::abs(g));
    }
    report.directors_zero = report.director_max_abs_grad == 0.0;

    const int per_tensor = std::max<int>(
        1, static_cast<int>((opts.min_samples + params.size() - 1) / params.size()));
    std::vector<double> errs;
    for (auto &np : params) {
        Tensor<double> &p = *np.tensor;
        const int64_t n = p.numel();
        for (int s = 0; s < per_tensor && s < n; ++s) {
            const int64_t idx = n <= per_tensor ? s : rng.uniform_int(static_cast<int>(n));
            const double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
            const double orig = p.data()[idx];
            p.data()[idx] = orig + opts.h;
            const double up = loss_value();
            p.data()[idx] = orig - opts.h;
            const double down = loss_value();
            p.data()[idx] = orig;
            const double numeric = (up - down) / (2.0 * opts.h);
            const double err = rel_error(analytic, numeric);
            errs.push_back(err);
            ++report.checked;
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = {np.name, idx, analytic, numeric, err};
            }
        }
    }
    std::sort(errs.begin(), errs.end());
    report.median_rel_err = errs.empty() ? 0.0 : errs[errs.size() / 2];
    report.passed = report.directors_zero && report.median_rel_err < opts.median_tol &&
                    report.max_rel_err < opts.max_tol;
    return report;
}

// ------------------------------------------------------------ FLOP counter

nlohmann::json FlopReport::to_json() const {
    return {{"tokens", tokens},
            {"channels", channels},
            {"experts", experts},
            {"batch", batch},
            {"top_k", top_k},
            {"mode", mode == RoutingMode::ImageWise ? "image" : "token"},
            {"gate_pool_image", gate_pool_image},
            {"gate_proj_image", gate_proj_image},
            {"gate_proj_token", gate_proj_token},
            {"gate_total_image", gate_total_image},
            {"gate_total_token", gate_total_token},
            {"expert_flops", expert_flops},
            {"attention_flops", attention_flops},
            {"total_overhead", total_overhead()}};
}

FlopReport count_routing_flops(int64_t tokens, int64_t channels, int64_t experts, int64_t batch,
                               int64_t top_k, RoutingMode mode) {
    if (tokens < 1 || channels < 1 || experts < 1 || batch < 1 || top_k < 1 || top_k > experts)
        throw ContractError("count_routing_flops: arguments must be positive with top_k <= experts");
    FlopReport r;
    r.tokens = tokens;
    r.channels = channels;
    r.experts = experts;
    r.batch = batch;
    r.top_k = top_k;
    r.mode = mode;
    r.gate_pool_image = batch * tokens * channels;
    r.gate_proj_image = batch * channels * experts;
    r.gate_proj_token = batch * tokens * channels * experts;
    r.gate_total_image = r.gate_pool_image + r.gate_proj_image;
    r.gate_total_token = r.gate_proj_token;
    r.expert_flops = batch * tokens * top_k * 8 * channels * channels;
    r.attention_flops = 4 * batch * tokens * channels * channels +
                        2 * batch * tokens * tokens * channels;
    return r;
}

// ---------------------------------------------------- activation histograms

nlohmann::json ActivationHistograms::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (int l = 0; l < layers; ++l)
        for (int d = 0; d < modalities; ++d)
            for (int r = 0; r < experts; ++r)
                rows.push_back({{"layer", l}, {"modality", d}, {"expert", r}, {"mass", at(l, d, r)}});
    nlohmann::json counts_json(counts);
    return {{"layers", layers},
            {"modalities", modalities},
            {"experts", experts},
            {"counts", counts_json},
            {"rows", rows}};
}

void ActivationHistograms::write_csv(const std::string &path) const {
    std::ofstream f(path);
    if (!f) throw Error("cannot open " + path + " for writing");
    f << "layer,modality,expert,mass\n";
    for (int l = 0; l < layers; ++l)
        for (int d = 0; d < modalities; ++d)
            for (int r = 0; r < experts; ++r)
                f << l << "," << d << "," << r << "," << at(l, d, r) << "\n";
}

template <typename T>
ActivationHistograms activation_histograms(DexNet<T> &net, const ModalityMixture &mix,
                                           int n_samples, Rng &rng, int batch_size) {
    ActivationHistograms hist;
    hist.layers = net.cfg.depth;
    hist.modalities = mix.modalities;
    hist.experts = net.cfg.experts;
    hist.mass.assign(static_cast<size_t>(hist.layers) * hist.modalities * hist.experts, 0.0);
    hist.counts.assign(hist.modalities, 0);

    int remaining = n_samples;
    while (remaining > 0) {
        const int b = std::min(batch_size, remaining);
        remaining -= b;
        const auto samples = sample_batch(mix, b, rng);
        auto batch = to_pixel_batch<T>(samples);
        auto tokens = patch_embed(net, batch);
        EncodeOptions<T> opts;  // eval mode
        auto enc = encode(net, tokens, opts);
        for (int l = 0; l < hist.layers; ++l) {
            const auto &routing = enc.routing[l];
            const int64_t K = routing.weights.dim(1);
            for (int i = 0; i < b; ++i) {
                const int d = samples[i].modality;
                for (int64_t k = 0; k < K; ++k)
                    hist.mass[(static_cast<size_t>(l) * hist.modalities + d) * hist.experts +
                              routing.topk[i][k]] +=
                        static_cast<double>(routing.weights.data()[i * K + k]);
            }
        }
        for (int i = 0; i < b; ++i) ++hist.counts[samples[i].modality];
    }

    for (int l = 0; l < hist.layers; ++l)
        for (int d = 0; d < hist.modalities; ++d) {
            double total = 0;
            const size_t base = (static_cast<size_t>(l) * hist.modalities + d) * hist.experts;
            for (int r = 0; r < hist.experts; ++r) total += hist.mass[base + r];
            if (total > 0)
                for (int r = 0; r < hist.experts; ++r) hist.mass[base + r] /= total;
        }
    return hist;
}

double jensen_shannon_bits(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("jensen_shannon_bits: length mismatch");
    auto kl_to_mid = [&](std::span<const double> a) {
        double acc = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            if (a[i] <= 0) continue;
            const double m = 0.5 * (p[i] + q[i]);
            acc += a[i] * std::log2(a[i] / m);
        }
        return acc;
    };
    return 0.5 * kl_to_mid(p) + 0.5 * kl_to_mid(q);
}

double mean_pairwise_jsd(const ActivationHistograms &hist, int layer) {
    double acc = 0;
    int pairs = 0;
    for (int a = 0; a < hist.modalities; ++a) {
        if (hist.counts[a] == 0) continue;
        for (int b = a + 1; b < hist.modalities; ++b) {
            if (hist.counts[b] == 0) continue;
            acc += jensen_shannon_bits(hist.row(layer, a), hist.row(layer, b));
            ++pairs;
        }
    }
    return pairs > 0 ? acc / pairs : 0.0;
}

// ------------------------------------------------------------- linear probe

nlohmann::json ProbeResult::to_json() const {
    return {{"accuracy", accuracy},
            {"classes", classes},
            {"train_count", train_count},
            {"test_count", test_count},
            {"l2_used", l2_used},
            {"regularizer_raised", regularizer_raised}};
}

namespace {

// In-place Cholesky A = L L^T; returns false on a non-positive pivot.
bool cholesky(std::vector<double> &a, int n) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[static_cast<size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                s -= a[static_cast<size_t>(i) * n + k] * a[static_cast<size_t>(j) * n + k];
            if (i == j) {
                if (s <= 0) return false;
                a[static_cast<size_t>(i) * n + j] = std::sqrt(s);
            } else {
                a[static_cast<size_t>(i) * n + j] = s / a[static_cast<size_t>(j) * n + j];
            }
        }
    }
    return true;
}

void cholesky_solve(const std::vector<double> &l, int n, std::vector<double> &b, int cols) {
    // forward then backward substitution, b is n x cols
    for (int c = 0; c < cols; ++c) {
        for (int i = 0; i < n; ++i) {
            double s = b[static_cast<size_t>(i) * cols + c];
            for (int k = 0; k < i; ++k)
                s -= l[static_cast<size_t>(i) * n + k] * b[static_cast<size_t>(k) * cols + c];
            b[static_cast<size_t>(i) * cols + c] = s / l[static_cast<size_t>(i) * n + i];
        }
        for (int i = n - 1; i >= 0; --i) {
            double s = b[static_cast<size_t>(i) * cols + c];
            for (int k = i + 1; k < n; ++k)
                s -= l[static_cast<size_t>(k) * n + i] * b[static_cast<size_t>(k) * cols + c];
            b[static_cast<size_t>(i) * cols + c] = s / l[static_cast<size_t>(i) * n + i];
        }
    }
}

}  // namespace

ProbeResult linear_probe(const std::vector<std::vector<double>> &features,
                         const std::vector<int> &labels, double l2_reg, double train_frac) {
    if (features.size() != labels.size() || features.empty())
        throw ContractError("linear_probe: features/labels size mismatch or empty");
    const int n = static_cast<int>(features.size());
    const int f = static_cast<int>(features[0].size());
    const int dim = f + 1;  // bias column
    int classes = 0;
    for (int y : labels) classes = std::max(classes, y + 1);
    const int train_n = std::max(1, static_cast<int>(train_frac * n));
    const int test_n = n - train_n;
    if (test_n < 1) throw ContractError("linear_probe: no held-out rows");
    std::vector<int> per_class(classes, 0);
    for (int i = 0; i < train_n; ++i) ++per_class[labels[i]];
    for (int c = 0; c < classes; ++c)
        if (per_class[c] < 10)
            throw ContractError("linear_probe: need at least 10 training samples per class");

    // Normal equations on the training block.
    std::vector<double> xtx(static_cast<size_t>(dim) * dim, 0.0);
    std::vector<double> xty(static_cast<size_t>(dim) * classes, 0.0);
    std::vector<double> row(dim);
    for (int i = 0; i < train_n; ++i) {
        for (int j = 0; j < f; ++j) row[j] = features[i][j];
        row[f] = 1.0;
        for (int a = 0; a < dim; ++a) {
            for (int b = 0; b <= a; ++b) xtx[static_cast<size_t>(a) * dim + b] += row[a] * row[b];
            xty[static_cast<size_t>(a) * classes + labels[i]] += row[a];
        }
    }
    for (int a = 0; a < dim; ++a)
        for (int b = a + 1; b < dim; ++b)
            xtx[static_cast<size_t>(a) * dim + b] = xtx[static_cast<size_t>(b) * dim + a];

    ProbeResult res;
    res.classes = classes;
    res.train_count = train_n;
    res.test_count = test_n;
    double l2 = std::max(l2_reg, 1e-12);
    std::vector<double> w;
    for (int attempt = 0;; ++attempt) {
        std::vector<double> a = xtx;
        for (int i = 0; i < dim; ++i) a[static_cast<size_t>(i) * dim + i] += l2;
        w = xty;
        if (cholesky(a, dim)) {
            cholesky_solve(a, dim, w, classes);
            break;
        }
        if (attempt >= 12) throw NumericError("linear_probe: system stayed singular");
        l2 *= 10.0;
        res.regularizer_raised = true;
        std::cerr << "linear_probe: singular system, raising l2 to " << l2 << "\n";
    }
    res.l2_used = l2;

    int correct = 0;
    for (int i = train_n; i < n; ++i) {
        int best = 0;
        double best_score = -1e300;
        for (int c = 0; c < classes; ++c) {
            double s = w[static_cast<size_t>(f) * classes + c];
            for (int j = 0; j < f; ++j) s += features[i][j] * w[static_cast<size_t>(j) * classes + c];
            if (s > best_score) {
                best_score = s;
                best = c;
            }
        }
        if (best == labels[i]) ++correct;
    }
    res.accuracy = static_cast<double>(correct) / test_n;
    return res;
}

template <typename T>
void probe_dataset(DexNet<T> &net, const ModalityMixture &mix, int n_samples, Rng &rng,
                   std::vector<std::vector<double>> &features, std::vector<int> &semantic,
                   std::vector<int> &modality, int batch_size) {
    features.clear();
    semantic.clear();
    modality.clear();
    int remaining = n_samples;
    while (remaining > 0) {
        const int b = std::min(batch_size, remaining);
        remaining -= b;
        const auto samples = sample_batch(mix, b, rng);
        auto batch = to_pixel_batch<T>(samples);
        auto pooled = pooled_features(net, batch);  // [b, C]
        const int64_t C = pooled.dim(1);
        for (int i = 0; i < b; ++i) {
            std::vector<double> row(C);
            for (int64_t c = 0; c < C; ++c) row[c] = static_cast<double>(pooled.data()[i * C + c]);
            features.push_back(std::move(row));
            semantic.push_back(samples[i].semantic);
            modality.push_back(samples[i].modality);
        }
    }
}

void pixel_probe_dataset(const ModalityMixture &mix, int n_samples, Rng &rng,
                         std::vector<std::vector<double>> &features, std::vector<int> &semantic,
                         std::vector<int> &modality) {
    features.clear();
    semantic.clear();
    modality.clear();
    const auto samples = sample_batch(mix, n_samples, rng);
    for (const auto &s : samples) {
        features.push_back(s.image);
        semantic.push_back(s.semantic);
        modality.push_back(s.modality);
    }
}

template ActivationHistograms activation_histograms(DexNet<float> &, const ModalityMixture &, int,
                                                    Rng &, int);
template ActivationHistograms activation_histograms(DexNet<double> &, const ModalityMixture &, int,
                                                    Rng &, int);
template void probe_dataset(DexNet<float> &, const ModalityMixture &, int, Rng &,
                            std::vector<std::vector<double>> &, std::vector<int> &,
                            std::vector<int> &, int);
template void probe_dataset(DexNet<double> &, const ModalityMixture &, int, Rng &,
                            std::vector<std::vector<double>> &, std::vector<int> &,
                            std::vector<int> &, int);

}  // namespace dex
