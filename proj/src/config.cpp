#include "dex/config.hpp"

#include <fstream>
#include <set>

namespace dex {

namespace {

void check_keys(const nlohmann::json &j, const std::set<std::string> &known,
                const std::string &scope) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("unknown config key \"" + (scope.empty() ? it.key() : scope + "." + it.key()) + "\"");
}

template <typename V>
void read_field(const nlohmann::json &j, const char *key, V &out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<V>();
        } catch (const nlohmann::json::exception &) {
            throw ConfigError(std::string("bad value for config key \"") + key + "\"");
        }
    }
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig cfg;
    cfg.data = ModalityMixture::defaults(4, cfg.network.image_size);
    return cfg;
}

void RunConfig::validate() const {
    network.validate();
    train.validate();
    data.validate();
    if (data.image_size != network.image_size)
        throw ConfigError("data.image_size is derived from network.image_size and diverged");
    if (network.channels != 1)
        throw ConfigError("the synthetic mixture generates single-channel images");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json net{{"image_size", network.image_size},
                       {"patch_size", network.patch_size},
                       {"channels", network.channels},
                       {"embed_dim", network.embed_dim},
                       {"depth", network.depth},
                       {"heads", network.heads},
                       {"experts", network.experts},
                       {"top_k", network.top_k},
                       {"decoder_dim", network.decoder_dim},
                       {"decoder_depth", network.decoder_depth},
                       {"decoder_heads", network.decoder_heads},
                       {"mask_ratio", network.mask_ratio}};
    nlohmann::json tr{{"steps", train.steps},
                      {"warmup_frac", train.warmup_frac},
                      {"base_lr", train.base_lr},
                      {"batch", train.batch},
                      {"weight_decay", train.weight_decay},
                      {"lambda_co", train.lambda_co},
                      {"lambda_bal_init", train.lambda_bal_init},
                      {"sigma_init", train.sigma_init},
                      {"m_init", train.m_init},
                      {"m_final", train.m_final},
                      {"mu", train.mu},
                      {"seed", train.seed},
                      {"precision", train.precision},
                      {"grad_clip", train.grad_clip}};
    if (train.lambda_bal_fixed) tr["lambda_bal_fixed"] = *train.lambda_bal_fixed;
    nlohmann::json styles = nlohmann::json::array();
    for (const auto &s : data.styles)
        styles.push_back({{"band_freq", s.band_freq},
                          {"band_amp", s.band_amp},
                          {"noise_amp", s.noise_amp},
                          {"gamma", s.gamma},
                          {"offset", s.offset}});
    nlohmann::json dt{{"modalities", data.modalities},
                      {"proportions", data.proportions},
                      {"styles", styles},
                      {"shape_classes", data.shape_classes},
                      {"seed", data.seed}};
    return {{"network", net}, {"train", tr}, {"data", dt}, {"out_dir", out_dir}};
}

RunConfig RunConfig::from_json(const nlohmann::json &j) {
    RunConfig cfg = defaults();
    check_keys(j, {"network", "train", "data", "out_dir"}, "");

    if (j.contains("network")) {
        const auto &n = j.at("network");
        check_keys(n,
                   {"image_size", "patch_size", "channels", "embed_dim", "depth", "heads",
                    "experts", "top_k", "decoder_dim", "decoder_depth", "decoder_heads",
                    "mask_ratio"},
                   "network");
        read_field(n, "image_size", cfg.network.image_size);
        read_field(n, "patch_size", cfg.network.patch_size);
        read_field(n, "channels", cfg.network.channels);
        read_field(n, "embed_dim", cfg.network.embed_dim);
        read_field(n, "depth", cfg.network.depth);
        read_field(n, "heads", cfg.network.heads);
        read_field(n, "experts", cfg.network.experts);
        read_field(n, "top_k", cfg.network.top_k);
        read_field(n, "decoder_dim", cfg.network.decoder_dim);
        read_field(n, "decoder_depth", cfg.network.decoder_depth);
        read_field(n, "decoder_heads", cfg.network.decoder_heads);
        read_field(n, "mask_ratio", cfg.network.mask_ratio);
    }
    if (j.contains("train")) {
        const auto &t = j.at("train");
        check_keys(t,
                   {"steps", "warmup_frac", "base_lr", "batch", "weight_decay", "lambda_co",
                    "lambda_bal_init", "lambda_bal_fixed", "sigma_init", "m_init", "m_final",
                    "mu", "seed", "precision", "grad_clip"},
                   "train");
        read_field(t, "steps", cfg.train.steps);
        read_field(t, "warmup_frac", cfg.train.warmup_frac);
        read_field(t, "base_lr", cfg.train.base_lr);
        read_field(t, "batch", cfg.train.batch);
        read_field(t, "weight_decay", cfg.train.weight_decay);
        read_field(t, "lambda_co", cfg.train.lambda_co);
        read_field(t, "lambda_bal_init", cfg.train.lambda_bal_init);
        if (t.contains("lambda_bal_fixed") && !t.at("lambda_bal_fixed").is_null()) {
            double v = 0;
            read_field(t, "lambda_bal_fixed", v);
            cfg.train.lambda_bal_fixed = v;
        }
        read_field(t, "sigma_init", cfg.train.sigma_init);
        read_field(t, "m_init", cfg.train.m_init);
        read_field(t, "m_final", cfg.train.m_final);
        read_field(t, "mu", cfg.train.mu);
        read_field(t, "seed", cfg.train.seed);
        read_field(t, "precision", cfg.train.precision);
        read_field(t, "grad_clip", cfg.train.grad_clip);
    }
    if (j.contains("data")) {
        const auto &d = j.at("data");
        check_keys(d, {"modalities", "proportions", "styles", "shape_classes", "seed"}, "data");
        int modalities = cfg.data.modalities;
        read_field(d, "modalities", modalities);
        if (modalities < 1) throw ConfigError("data.modalities must be >= 1");
        cfg.data = ModalityMixture::defaults(modalities, cfg.network.image_size);
        read_field(d, "proportions", cfg.data.proportions);
        read_field(d, "shape_classes", cfg.data.shape_classes);
        read_field(d, "seed", cfg.data.seed);
        if (d.contains("styles")) {
            const auto &styles = d.at("styles");
            if (!styles.is_array() || static_cast<int>(styles.size()) != modalities)
                throw ConfigError("data.styles must be an array with one entry per modality");
            cfg.data.styles.clear();
            for (const auto &s : styles) {
                check_keys(s, {"band_freq", "band_amp", "noise_amp", "gamma", "offset"},
                           "data.styles[]");
                ModalityStyle st;
                read_field(s, "band_freq", st.band_freq);
                read_field(s, "band_amp", st.band_amp);
                read_field(s, "noise_amp", st.noise_amp);
                read_field(s, "gamma", st.gamma);
                read_field(s, "offset", st.offset);
                cfg.data.styles.push_back(st);
            }
        }
    } else {
        cfg.data = ModalityMixture::defaults(cfg.data.modalities, cfg.network.image_size);
    }
    cfg.data.image_size = cfg.network.image_size;
    read_field(j, "out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

void apply_override(nlohmann::json &j, const std::string &assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like key.path=value, got \"" + assignment + "\"");
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception &) {
        parsed = value;  // plain string
    }

    nlohmann::json *node = &j;
    size_t begin = 0;
    while (true) {
        const size_t dot = path.find('.', begin);
        const std::string key = path.substr(begin, dot == std::string::npos ? dot : dot - begin);
        if (key.empty()) throw ConfigError("empty key segment in override \"" + assignment + "\"");
        if (dot == std::string::npos) {
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        begin = dot + 1;
    }
}

RunConfig RunConfig::load(const std::string &path, const std::vector<std::string> &overrides) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError("cannot parse " + path + ": " + e.what());
    }
    for (const auto &o : overrides) apply_override(j, o);
    return from_json(j);
}

}  // namespace dex
