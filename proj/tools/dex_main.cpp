#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dex/analysis.hpp"
#include "dex/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exit codes: 0 ok, 1 check failed, 2 usage/config, 3 numeric abort.
constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

int read_thread_cap() {
    const char *env = std::getenv("DEX_THREADS");
    if (!env) return 1;
    try {
        const int v = std::stoi(env);
        if (v < 1) throw std::invalid_argument("non-positive");
        return v;
    } catch (...) {
        throw dex::ConfigError("DEX_THREADS must be a positive integer");
    }
}

template <typename T>
int run_pretrain(const dex::RunConfig &cfg) {
    fs::create_directories(cfg.out_dir);
    std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.jsonl",
                          std::ios::trunc | std::ios::binary);
    if (!metrics) throw dex::ConfigError("cannot write into out_dir " + cfg.out_dir);
    {
        std::ofstream snap(fs::path(cfg.out_dir) / "config.json", std::ios::trunc);
        snap << cfg.to_json().dump(2) << "\n";
    }
    dex::Trainer<T> trainer(cfg.network, cfg.train, cfg.data);
    trainer.run(&metrics);
    dex::save_checkpoint<T>((fs::path(cfg.out_dir) / "checkpoint.dexckpt").string(),
                            trainer.net(), &trainer.opt(), trainer.current_step(),
                            &trainer.rng(), cfg.to_json());
    std::cout << "pretrain: " << cfg.train.steps << " steps done, outputs in " << cfg.out_dir
              << "\n";
    return kExitOk;
}

int cmd_pretrain(const std::string &config_path, const std::vector<std::string> &overrides) {
    const auto cfg = dex::RunConfig::load(config_path, overrides);
    if (cfg.train.precision == "f32") return run_pretrain<float>(cfg);
    return run_pretrain<double>(cfg);
}

int cmd_gradcheck(const std::string &config_path, const std::vector<std::string> &overrides) {
    auto cfg = dex::RunConfig::load(config_path, overrides);
    // Gradient verification always runs in 64-bit mode.
    dex::Rng rng(cfg.train.seed);
    auto net = dex::make_dex_net<double>(cfg.network, rng);
    const int batch = std::min(cfg.train.batch, 8);
    auto pixels = dex::to_pixel_batch<double>(dex::sample_batch(cfg.data, batch, rng));
    dex::GradcheckOptions opts;
    opts.seed = cfg.train.seed + 1;
    const auto report = dex::gradcheck(net, pixels, opts);
    std::cout << report.to_json().dump(2) << "\n";
    return report.passed ? kExitOk : kExitCheckFailed;
}

template <typename T>
int run_analyze(const std::string &ckpt_path, const std::string &what, const std::string &out_dir,
                int n_samples) {
    const auto ckpt = dex::read_checkpoint<T>(ckpt_path);
    const auto cfg = dex::RunConfig::from_json(ckpt.manifest.at("config"));
    dex::Rng init_rng(cfg.train.seed);
    auto net = dex::make_dex_net<T>(cfg.network, init_rng);
    dex::restore_model(net, ckpt);
    fs::create_directories(out_dir);

    if (what == "histograms") {
        dex::Rng rng(cfg.data.seed + 17);
        auto hist = dex::activation_histograms(net, cfg.data, n_samples, rng);
        hist.write_csv((fs::path(out_dir) / "histograms.csv").string());
        json j = hist.to_json();
        json jsd = json::array();
        for (int l = 0; l < hist.layers; ++l) jsd.push_back(dex::mean_pairwise_jsd(hist, l));
        j["mean_pairwise_jsd_bits_per_layer"] = jsd;
        std::ofstream(fs::path(out_dir) / "histograms.json") << j.dump(2) << "\n";
        std::cout << j["mean_pairwise_jsd_bits_per_layer"].dump() << "\n";
        return kExitOk;
    }
    if (what == "flops") {
        json out = json::array();
        for (int64_t n : {64, 256, 1024, static_cast<int64_t>(cfg.network.tokens())})
            for (auto mode : {dex::RoutingMode::ImageWise, dex::RoutingMode::TokenWise})
                out.push_back(dex::count_routing_flops(n, cfg.network.embed_dim,
                                                       cfg.network.experts, cfg.train.batch,
                                                       cfg.network.top_k, mode)
                                  .to_json());
        std::ofstream(fs::path(out_dir) / "flops.json") << out.dump(2) << "\n";
        std::cout << "flops report written (" << out.size() << " configurations)\n";
        return kExitOk;
    }
    if (what == "probe") {
        dex::Rng rng(cfg.data.seed + 29);
        std::vector<std::vector<double>> features;
        std::vector<int> semantic, modality;
        dex::probe_dataset(net, cfg.data, n_samples, rng, features, semantic, modality);
        json j{{"semantic", dex::linear_probe(features, semantic, 1e-2).to_json()},
               {"modality", dex::linear_probe(features, modality, 1e-2).to_json()}};
        std::ofstream(fs::path(out_dir) / "probe.json") << j.dump(2) << "\n";
        std::cout << j.dump(2) << "\n";
        return kExitOk;
    }
    throw dex::ConfigError("--what must be histograms, flops or probe");
}

int cmd_analyze(const std::string &ckpt_path, const std::string &what, const std::string &out_dir,
                int n_samples) {
    const auto manifest = dex::read_checkpoint_manifest(ckpt_path);
    if (manifest.value("precision", "") == "f32")
        return run_analyze<float>(ckpt_path, what, out_dir, n_samples);
    return run_analyze<double>(ckpt_path, what, out_dir, n_samples);
}

int cmd_gen_samples(const std::string &config_path, const std::string &out_dir, int count,
                    const std::vector<std::string> &overrides) {
    const auto cfg = dex::RunConfig::load(config_path, overrides);
    fs::create_directories(out_dir);
    dex::Rng rng(cfg.data.seed);
    const auto samples = dex::sample_batch(cfg.data, count, rng);
    std::ofstream csv(fs::path(out_dir) / "labels.csv", std::ios::trunc);
    csv << "index,filename,modality,semantic,shape\n";
    for (size_t i = 0; i < samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04zu.pgm", i);
        dex::write_pgm((fs::path(out_dir) / name).string(), samples[i].image,
                       cfg.data.image_size, cfg.data.image_size);
        csv << i << "," << name << "," << samples[i].modality << "," << samples[i].semantic << ","
            << dex::shape_class_name(samples[i].semantic) << "\n";
    }
    std::cout << "wrote " << samples.size() << " samples to " << out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"dex: gated expert-pool masked-autoencoder pretraining on a synthetic "
                 "multi-modality mixture"};
    app.require_subcommand(1);
    app.footer("Default configuration (override any key via the JSON config or --set):\n" +
               dex::RunConfig::defaults().to_json().dump(2));

    std::string config_path, ckpt_path, what = "histograms", out_dir = ".";
    std::vector<std::string> overrides;
    int count = 16, n_samples = 2000;

    auto *pre = app.add_subcommand("pretrain", "run the pretraining loop");
    pre->add_option("--config", config_path, "config JSON path")->required();
    pre->add_option("--set", overrides, "dotted-key override, e.g. train.seed=7");

    auto *gc = app.add_subcommand("gradcheck", "finite-difference gradient verification (64-bit)");
    gc->add_option("--config", config_path, "config JSON path")->required();
    gc->add_option("--set", overrides, "dotted-key override");

    auto *an = app.add_subcommand("analyze", "reports from a checkpoint");
    an->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    an->add_option("--what", what, "histograms | flops | probe")->required();
    an->add_option("--out", out_dir, "output directory (default .)");
    an->add_option("--samples", n_samples, "sample count for histograms/probe");

    auto *gs = app.add_subcommand("gen-samples", "write sample images and a labels CSV");
    gs->add_option("--config", config_path, "config JSON path")->required();
    gs->add_option("--out", out_dir, "output directory")->required();
    gs->add_option("-n", count, "number of samples");
    gs->add_option("--set", overrides, "dotted-key override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        read_thread_cap();  // validated; all built-in kernels are single-threaded
        if (pre->parsed()) return cmd_pretrain(config_path, overrides);
        if (gc->parsed()) return cmd_gradcheck(config_path, overrides);
        if (an->parsed()) return cmd_analyze(ckpt_path, what, out_dir, n_samples);
        if (gs->parsed()) return cmd_gen_samples(config_path, out_dir, count, overrides);
    } catch (const dex::ConfigError &e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    } catch (const dex::FormatError &e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    } catch (const dex::NumericError &e) {
        std::cerr << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception &e) {
        std::cerr << e.what() << "\n";
        return kExitCheckFailed;
    }
    return kExitUsage;
}
