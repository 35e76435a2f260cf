#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dex/model.hpp"
#include "dex/synth.hpp"

namespace dex {

struct TrainConfig {
    int64_t steps = 2000;
    double warmup_frac = 0.1;   // fraction of steps with linear lr warmup
    double base_lr = 1e-4;
    int batch = 64;
    double weight_decay = 0.05;
    double lambda_co = 0.1;
    double lambda_bal_init = 0.01;
    std::optional<double> lambda_bal_fixed;  // constant override of the schedule
    double sigma_init = 1.0;
    double m_init = 0.99;
    double m_final = 1.0;
    double mu = 0.99;           // gate frequency-EMA momentum
    uint64_t seed = 0;
    std::string precision = "f64";  // f64 | f32
    double grad_clip = 0.0;         // 0 disables

    void validate() const;
};

struct ScheduleValues {
    double lr = 0;
    double m = 0;
    double sigma = 0;
    double lambda_bal = 0;
};

// lr: linear warmup then cosine to zero. m rises m_init -> m_final and
// sigma / lambda_bal decay to zero, all on the same half-cosine in t/T.
ScheduleValues schedules(int64_t t, int64_t total_steps, const TrainConfig &cfg);

// AdamW with decoupled weight decay and bias-corrected moments. Moments are
// kept per parameter name so they can round-trip through checkpoints.
template <typename T>
class AdamW {
public:
    explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // One update over all params; throws NumericError on a non-finite grad.
    void step(const std::vector<NamedParam<T>> &params, double lr, double weight_decay);

    int64_t step_count() const { return t_; }
    void set_step_count(int64_t t) { t_ = t; }

    struct Slot {
        std::vector<T> exp_avg, exp_avg_sq;
    };
    std::map<std::string, Slot> &slots() { return slots_; }

private:
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Slot> slots_;
};

template <typename T>
double global_grad_norm(const std::vector<NamedParam<T>> &params);
template <typename T>
void clip_gradients(const std::vector<NamedParam<T>> &params, double max_norm);

struct StepMetrics {
    int64_t step = 0;
    double loss_total = 0;
    double loss_self = 0;
    std::vector<double> loss_co;   // per layer
    std::vector<double> loss_bal;  // per layer
    double lr = 0, m = 0, sigma = 0, lambda_bal = 0;
};

// One JSON-lines record, keys: step, loss_total, loss_self,
// loss_co_per_layer, loss_bal_per_layer, lr, m, sigma, lambda_bal.
nlohmann::json metrics_json(const StepMetrics &e);

template <typename T>
PixelBatch<T> to_pixel_batch(const std::vector<Sample> &samples);

// Training driver: owns the model, optimizer, data stream state and metric
// history. One writer; everything is a deterministic function of the seed.
template <typename T>
class Trainer {
public:
    Trainer(const NetworkConfig &net_cfg, const TrainConfig &train_cfg,
            const ModalityMixture &mix);

    PixelBatch<T> next_batch();
    // One ordered update: forward (training mode), total loss, backward,
    // AdamW on the trainable params, then per block the contribution
    // weights, the director EMA at m(t), and the gate frequency EMA.
    StepMetrics step(const PixelBatch<T> &batch);
    StepMetrics run_step() { return step(next_batch()); }
    // Full loop; appends one JSON line per step to `metrics_out` if given.
    void run(std::ostream *metrics_out = nullptr);

    DexNet<T> &net() { return net_; }
    AdamW<T> &opt() { return opt_; }
    Rng &rng() { return rng_; }
    int64_t current_step() const { return step_; }
    void set_current_step(int64_t s) { step_ = s; }
    const TrainConfig &train_config() const { return tc_; }
    const ModalityMixture &mixture() const { return mix_; }
    const std::vector<StepMetrics> &history() const { return history_; }

private:
    TrainConfig tc_;
    ModalityMixture mix_;
    Rng rng_;
    DexNet<T> net_;
    AdamW<T> opt_;
    std::vector<NamedParam<T>> params_;  // cached trainable list
    int64_t step_ = 0;
    std::vector<StepMetrics> history_;
};

// ------------------------------------------------------------- checkpoint
//
// Layout: 8-byte magic "DEXCKPT1", little-endian u64 manifest length, UTF-8
// JSON manifest (version, step, precision, rng, config snapshot, array
// table with offsets relative to the data section), then the raw arrays.

template <typename T>
void save_checkpoint(const std::string &path, DexNet<T> &net, AdamW<T> *opt, int64_t step,
                     const Rng *rng, const nlohmann::json &config_snapshot);

template <typename T>
struct CheckpointData {
    nlohmann::json manifest;
    std::map<std::string, std::pair<Shape, std::vector<T>>> arrays;
};

template <typename T>
CheckpointData<T> read_checkpoint(const std::string &path);

// Manifest only (cheap peek at precision/config before choosing T).
nlohmann::json read_checkpoint_manifest(const std::string &path);

// Copies every model array (trainable, director, gate frequencies) out of
// the checkpoint; missing names -> FormatError, shape mismatch -> ShapeError.
template <typename T>
void restore_model(DexNet<T> &net, const CheckpointData<T> &ckpt);
template <typename T>
void restore_optimizer(AdamW<T> &opt, const CheckpointData<T> &ckpt);
template <typename T>
void restore_rng(Rng &rng, const CheckpointData<T> &ckpt);

}  // namespace dex
