#include "dex/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dex/kernels.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace dex {

void TrainConfig::validate() const {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0))
        throw ConfigError("warmup_frac must be in (0,1)");
    if (base_lr <= 0) throw ConfigError("base_lr must be positive");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (lambda_co < 0 || lambda_bal_init < 0)
        throw ConfigError("loss weights must be >= 0");
    if (sigma_init < 0) throw ConfigError("sigma_init must be >= 0");
    if (!(m_init >= 0 && m_init <= 1 && m_final >= 0 && m_final <= 1 && m_init <= m_final))
        throw ConfigError("momentum bounds must satisfy 0 <= m_init <= m_final <= 1");
    if (!(mu >= 0 && mu <= 1)) throw ConfigError("mu must be in [0,1]");
    if (precision != "f64" && precision != "f32")
        throw ConfigError("precision must be f64 or f32");
    if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
}

ScheduleValues schedules(int64_t t, int64_t total_steps, const TrainConfig &cfg) {
    if (t < 0 || t > total_steps) throw ContractError("schedule step out of [0, T]");
    ScheduleValues s;
    const double progress = static_cast<double>(t) / static_cast<double>(total_steps);
    const double half_cos = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));

    const int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(cfg.warmup_frac * total_steps));
    if (t < warmup) {
        s.lr = cfg.base_lr * static_cast<double>(t + 1) / static_cast<double>(warmup);
    } else {
        const double p = static_cast<double>(t - warmup) / static_cast<double>(total_steps - warmup);
        s.lr = cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
    }
    s.m = cfg.m_final - (cfg.m_final - cfg.m_init) * half_cos;
    s.sigma = cfg.sigma_init * half_cos;
    s.lambda_bal = cfg.lambda_bal_fixed ? *cfg.lambda_bal_fixed : cfg.lambda_bal_init * half_cos;
    return s;
}

// ------------------------------------------------------------------ AdamW

template <typename T>
void AdamW<T>::step(const std::vector<NamedParam<T>> &params, double lr, double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto &np : params) {
        Tensor<T> &p = *np.tensor;
        const size_t n = p.numel();
        Slot &slot = slots_[np.name];
        if (slot.exp_avg.empty()) {
            slot.exp_avg.assign(n, T(0));
            slot.exp_avg_sq.assign(n, T(0));
        }
        if (slot.exp_avg.size() != n)
            throw ShapeError("optimizer slot size mismatch for " + np.name);
        const T *g = p.grad_data();
        T *val = p.data();
        T *m = slot.exp_avg.data();
        T *v = slot.exp_avg_sq.data();
        for (size_t i = 0; i < n; ++i) {
            const double gi = static_cast<double>(g[i]);
            if (!std::isfinite(gi))
                throw NumericError("non-finite gradient in " + np.name);
            const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
            const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            double x = static_cast<double>(val[i]);
            x -= lr * weight_decay * x;  // decoupled decay
            x -= lr * mhat / (std::sqrt(vhat) + eps_);
            val[i] = static_cast<T>(x);
        }
    }
}

template <typename T>
double global_grad_norm(const std::vector<NamedParam<T>> &params) {
    double acc = 0;
    for (const auto &np : params) {
        const T *g = np.tensor->grad_data();
        const size_t n = np.tensor->numel();
        for (size_t i = 0; i < n; ++i) acc += static_cast<double>(g[i]) * g[i];
    }
    return std::sqrt(acc);
}

template <typename T>
void clip_gradients(const std::vector<NamedParam<T>> &params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm <= max_norm || norm == 0.0) return;
    const T s = static_cast<T>(max_norm / norm);
    for (const auto &np : params) {
        T *g = np.tensor->grad_data();
        kernels<T>().scale(g, g, s, np.tensor->numel());
    }
}

// ---------------------------------------------------------------- metrics

nlohmann::json metrics_json(const StepMetrics &e) {
    return nlohmann::json{{"step", e.step},
                          {"loss_total", e.loss_total},
                          {"loss_self", e.loss_self},
                          {"loss_co_per_layer", e.loss_co},
                          {"loss_bal_per_layer", e.loss_bal},
                          {"lr", e.lr},
                          {"m", e.m},
                          {"sigma", e.sigma},
                          {"lambda_bal", e.lambda_bal}};
}

template <typename T>
PixelBatch<T> to_pixel_batch(const std::vector<Sample> &samples) {
    PixelBatch<T> batch;
    batch.count = static_cast<int64_t>(samples.size());
    if (samples.empty()) return batch;
    const size_t px = samples[0].image.size();
    batch.pixels.reserve(px * samples.size());
    for (const auto &s : samples)
        for (double v : s.image) batch.pixels.push_back(static_cast<T>(v));
    return batch;
}

// ---------------------------------------------------------------- trainer

template <typename T>
Trainer<T>::Trainer(const NetworkConfig &net_cfg, const TrainConfig &train_cfg,
                    const ModalityMixture &mix)
    : tc_(train_cfg), mix_(mix), rng_(train_cfg.seed) {
    tc_.validate();
    mix_.validate();
    net_cfg.validate();
    if (mix_.image_size != net_cfg.image_size)
        throw ConfigError("mixture image_size must match network image_size");
    if (net_cfg.channels != 1)
        throw ConfigError("the synthetic mixture is single-channel");
    net_ = make_dex_net<T>(net_cfg, rng_);
    params_ = trainable_params(net_);
    for (auto &blk : net_.blocks) blk.gate.mu = static_cast<T>(tc_.mu);
}

template <typename T>
PixelBatch<T> Trainer<T>::next_batch() {
    return to_pixel_batch<T>(sample_batch(mix_, tc_.batch, rng_));
}

template <typename T>
StepMetrics Trainer<T>::step(const PixelBatch<T> &batch) {
    const auto sched = schedules(step_, tc_.steps, tc_);
    for (auto &blk : net_.blocks) blk.gate.sigma = static_cast<T>(sched.sigma);
    const auto weights = LossWeights::make(net_.cfg.depth, tc_.lambda_co, sched.lambda_bal);

    for (auto &np : params_) np.tensor->zero_grad();
    const auto plan = sample_mask(static_cast<int>(batch.count), net_.cfg.tokens(),
                                  net_.cfg.mask_ratio, rng_);

    ForwardResult<T> fwd;
    {
        Tape<T> tape;
        EncodeOptions<T> opts;
        opts.training = true;
        opts.rng = &rng_;
        fwd = pretrain_forward(net_, batch, plan, weights, opts);
        const double lt = static_cast<double>(fwd.loss_total.item());
        if (!std::isfinite(lt)) {
            std::ostringstream os;
            os << "non-finite loss at step " << step_ << ": self=" << fwd.loss_self.item();
            for (size_t l = 0; l < fwd.loss_co.size(); ++l)
                os << " co[" << l << "]=" << fwd.loss_co[l].item() << " bal[" << l
                   << "]=" << fwd.loss_bal[l].item();
            throw NumericError(os.str());
        }
        tape.backward(fwd.loss_total);
    }

    if (tc_.grad_clip > 0) clip_gradients(params_, tc_.grad_clip);
    opt_.step(params_, sched.lr, tc_.weight_decay);

    for (size_t l = 0; l < net_.blocks.size(); ++l) {
        auto &blk = net_.blocks[l];
        const auto omega = contribution_weights(fwd.routing[l]);
        gema_update(blk.experts, blk.director, std::span<const T>(omega),
                    static_cast<T>(sched.m));
        update_frequency_ema(blk.gate, fwd.routing[l]);
    }

    StepMetrics e;
    e.step = step_;
    e.loss_total = static_cast<double>(fwd.loss_total.item());
    e.loss_self = static_cast<double>(fwd.loss_self.item());
    for (auto &t : fwd.loss_co) e.loss_co.push_back(static_cast<double>(t.item()));
    for (auto &t : fwd.loss_bal) e.loss_bal.push_back(static_cast<double>(t.item()));
    e.lr = sched.lr;
    e.m = sched.m;
    e.sigma = sched.sigma;
    e.lambda_bal = sched.lambda_bal;
    history_.push_back(e);
    ++step_;
    return e;
}

template <typename T>
void Trainer<T>::run(std::ostream *metrics_out) {
    while (step_ < tc_.steps) {
        const auto e = run_step();
        if (metrics_out) *metrics_out << metrics_json(e).dump() << "\n";
    }
}

// ------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'D', 'E', 'X', 'C', 'K', 'P', 'T', '1'};
constexpr int kCheckpointVersion = 1;

template <typename T>
const char *dtype_name() {
    return sizeof(T) == 8 ? "f64" : "f32";
}

template <typename T>
struct ArrayRef {
    std::string name;
    Shape shape;
    const T *data;
    size_t count;
};

template <typename T>
void collect_arrays(DexNet<T> &net, AdamW<T> *opt, std::vector<ArrayRef<T>> &out) {
    for (auto &np : trainable_params(net))
        out.push_back({np.name, np.tensor->shape(), np.tensor->data(),
                       static_cast<size_t>(np.tensor->numel())});
    for (auto &np : director_params(net))
        out.push_back({np.name, np.tensor->shape(), np.tensor->data(),
                       static_cast<size_t>(np.tensor->numel())});
    for (size_t l = 0; l < net.blocks.size(); ++l) {
        auto &c = net.blocks[l].gate.c;
        out.push_back({"enc.blk" + std::to_string(l) + ".gate.c",
                       {static_cast<int64_t>(c.size())}, c.data(), c.size()});
    }
    if (opt) {
        for (auto &[name, slot] : opt->slots()) {
            out.push_back({"opt.exp_avg." + name, {static_cast<int64_t>(slot.exp_avg.size())},
                           slot.exp_avg.data(), slot.exp_avg.size()});
            out.push_back({"opt.exp_avg_sq." + name,
                           {static_cast<int64_t>(slot.exp_avg_sq.size())},
                           slot.exp_avg_sq.data(), slot.exp_avg_sq.size()});
        }
    }
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string &path, DexNet<T> &net, AdamW<T> *opt, int64_t step,
                     const Rng *rng, const nlohmann::json &config_snapshot) {
    std::vector<ArrayRef<T>> arrays;
    collect_arrays(net, opt, arrays);

    nlohmann::json manifest;
    manifest["version"] = kCheckpointVersion;
    manifest["step"] = step;
    manifest["precision"] = dtype_name<T>();
    manifest["config"] = config_snapshot;
    if (rng) manifest["rng"] = rng->serialize();
    if (opt) manifest["opt_step"] = opt->step_count();
    uint64_t offset = 0;
    auto &table = manifest["arrays"];
    table = nlohmann::json::array();
    for (const auto &a : arrays) {
        const uint64_t nbytes = a.count * sizeof(T);
        table.push_back({{"name", a.name},
                         {"shape", a.shape},
                         {"dtype", dtype_name<T>()},
                         {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
    }

    const std::string mstr = manifest.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + path + " for writing");
    f.write(kMagic, sizeof(kMagic));
    const uint64_t mlen = mstr.size();
    f.write(reinterpret_cast<const char *>(&mlen), sizeof(mlen));
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto &a : arrays)
        f.write(reinterpret_cast<const char *>(a.data),
                static_cast<std::streamsize>(a.count * sizeof(T)));
    if (!f) throw Error("short write to " + path);
}

namespace {

nlohmann::json parse_manifest(std::ifstream &f, const std::string &path, uint64_t &mlen) {
    char magic[8];
    if (!f.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    if (!f.read(reinterpret_cast<char *>(&mlen), sizeof(mlen)))
        throw FormatError("truncated checkpoint header in " + path);
    std::string mstr(mlen, '\0');
    if (!f.read(mstr.data(), static_cast<std::streamsize>(mlen)))
        throw FormatError("truncated checkpoint manifest in " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mstr);
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("unparseable checkpoint manifest: ") + e.what());
    }
    if (manifest.value("version", -1) != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version");
    return manifest;
}

}  // namespace

nlohmann::json read_checkpoint_manifest(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint " + path);
    uint64_t mlen = 0;
    return parse_manifest(f, path, mlen);
}

template <typename T>
CheckpointData<T> read_checkpoint(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint " + path);
    uint64_t mlen = 0;
    CheckpointData<T> ckpt;
    ckpt.manifest = parse_manifest(f, path, mlen);
    if (ckpt.manifest.value("precision", "") != dtype_name<T>())
        throw FormatError("checkpoint precision is " +
                          ckpt.manifest.value("precision", std::string("?")) +
                          ", expected " + dtype_name<T>());

    for (const auto &entry : ckpt.manifest.at("arrays")) {
        const std::string name = entry.at("name");
        const Shape shape = entry.at("shape").get<Shape>();
        const uint64_t nbytes = entry.at("nbytes");
        if (nbytes != static_cast<uint64_t>(shape_numel(shape)) * sizeof(T))
            throw FormatError("array byte count mismatch for " + name);
        std::vector<T> data(nbytes / sizeof(T));
        f.seekg(static_cast<std::streamoff>(sizeof(kMagic) + sizeof(mlen) + mlen +
                                            entry.at("offset").get<uint64_t>()));
        if (!f.read(reinterpret_cast<char *>(data.data()), static_cast<std::streamsize>(nbytes)))
            throw FormatError("truncated checkpoint data for " + name);
        ckpt.arrays.emplace(name, std::make_pair(shape, std::move(data)));
    }
    return ckpt;
}

namespace {

template <typename T>
void restore_array(const CheckpointData<T> &ckpt, const std::string &name, T *dst,
                   const Shape &shape) {
    auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end()) throw FormatError("checkpoint is missing array " + name);
    if (it->second.first != shape)
        throw ShapeError("checkpoint array " + name + " has shape " +
                         shape_str(it->second.first) + ", expected " + shape_str(shape));
    std::copy(it->second.second.begin(), it->second.second.end(), dst);
}

}  // namespace

template <typename T>
void restore_model(DexNet<T> &net, const CheckpointData<T> &ckpt) {
    for (auto &np : trainable_params(net))
        restore_array(ckpt, np.name, np.tensor->data(), np.tensor->shape());
    for (auto &np : director_params(net))
        restore_array(ckpt, np.name, np.tensor->data(), np.tensor->shape());
    for (size_t l = 0; l < net.blocks.size(); ++l) {
        auto &c = net.blocks[l].gate.c;
        restore_array(ckpt, "enc.blk" + std::to_string(l) + ".gate.c", c.data(),
                      {static_cast<int64_t>(c.size())});
    }
}

template <typename T>
void restore_optimizer(AdamW<T> &opt, const CheckpointData<T> &ckpt) {
    opt.set_step_count(ckpt.manifest.value("opt_step", int64_t{0}));
    opt.slots().clear();
    const std::string m_prefix = "opt.exp_avg.";
    const std::string v_prefix = "opt.exp_avg_sq.";
    for (const auto &[name, payload] : ckpt.arrays) {
        if (name.rfind(m_prefix, 0) == 0)
            opt.slots()[name.substr(m_prefix.size())].exp_avg = payload.second;
        else if (name.rfind(v_prefix, 0) == 0)
            opt.slots()[name.substr(v_prefix.size())].exp_avg_sq = payload.second;
    }
}

template <typename T>
void restore_rng(Rng &rng, const CheckpointData<T> &ckpt) {
    if (!ckpt.manifest.contains("rng")) throw FormatError("checkpoint carries no rng state");
    rng.deserialize(ckpt.manifest.at("rng").get<std::string>());
}

// ----------------------------------------------------------- instantiation

#define DEX_INSTANTIATE_TRAIN(T)                                                                  \
    template class AdamW<T>;                                                                      \
    template class Trainer<T>;                                                                    \
    template double global_grad_norm(const std::vector<NamedParam<T>> &);                         \
    template void clip_gradients(const std::vector<NamedParam<T>> &, double);                     \
    template PixelBatch<T> to_pixel_batch(const std::vector<Sample> &);                           \
    template void save_checkpoint(const std::string &, DexNet<T> &, AdamW<T> *, int64_t,          \
                                  const Rng *, const nlohmann::json &);                           \
    template CheckpointData<T> read_checkpoint(const std::string &);                              \
    template void restore_model(DexNet<T> &, const CheckpointData<T> &);                          \
    template void restore_optimizer(AdamW<T> &, const CheckpointData<T> &);                       \
    template void restore_rng(Rng &, const CheckpointData<T> &);

DEX_INSTANTIATE_TRAIN(float)
DEX_INSTANTIATE_TRAIN(double)

#undef DEX_INSTANTIATE_TRAIN

}  // namespace dex
