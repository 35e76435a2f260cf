#include "dex/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "dex/errors.hpp"

namespace dex {

namespace {

constexpr int kGratings = 3;
constexpr int kOrientations = 8;
constexpr double kShapeBlend = 0.8;   // foreground mix strength
constexpr double kShapeLevel = 0.9;   // foreground brightness

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

// 1px anti-aliased coverage from a signed distance (positive = inside).
double coverage(double d) { return clip01(d + 0.5); }

double shape_distance(ShapeClass shape, double dx, double dy, double r) {
    switch (shape) {
        case ShapeClass::Disc:
            return r - std::hypot(dx, dy);
        case ShapeClass::Square: {
            const double half = 0.82 * r;
            return half - std::max(std::abs(dx), std::abs(dy));
        }
        case ShapeClass::Cross: {
            const double arm = 0.34 * r;
            const double hbar = std::min(r - std::abs(dx), arm - std::abs(dy));
            const double vbar = std::min(arm - std::abs(dx), r - std::abs(dy));
            return std::max(hbar, vbar);
        }
        case ShapeClass::Ring: {
            const double rho = std::hypot(dx, dy);
            return std::min(rho - 0.55 * r, r - rho);
        }
    }
    return -1.0;
}

}  // namespace

std::string shape_class_name(int semantic) {
    switch (static_cast<ShapeClass>(semantic)) {
        case ShapeClass::Disc: return "disc";
        case ShapeClass::Square: return "square";
        case ShapeClass::Cross: return "cross";
        case ShapeClass::Ring: return "ring";
    }
    return "?";
}

void ModalityMixture::validate() const {
    if (modalities < 1) throw ConfigError("mixture needs at least one modality");
    if (static_cast<int>(proportions.size()) != modalities)
        throw ConfigError("proportions length must equal modality count");
    double total = 0;
    for (double p : proportions) {
        if (p < 0) throw ConfigError("proportions must be non-negative");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("proportions must sum to 1");
    if (static_cast<int>(styles.size()) != modalities)
        throw ConfigError("styles length must equal modality count");
    for (int a = 0; a < modalities; ++a)
        for (int b = a + 1; b < modalities; ++b) {
            const auto &sa = styles[a], &sb = styles[b];
            if (sa.band_freq == sb.band_freq && sa.band_amp == sb.band_amp &&
                sa.noise_amp == sb.noise_amp && sa.gamma == sb.gamma && sa.offset == sb.offset)
                throw ConfigError("modality styles must be pairwise distinct");
        }
    if (shape_classes < 1 || shape_classes > kShapeClassCount)
        throw ConfigError("shape_classes must be in [1,4]");
    if (image_size < 8) throw ConfigError("image_size must be at least 8");
    for (const auto &s : styles)
        if (s.band_freq <= 0 || s.band_freq >= image_size / 2.0)
            throw ConfigError("band_freq must lie below the Nyquist limit");
}

ModalityMixture ModalityMixture::defaults(int modalities, int image_size) {
    ModalityMixture mix;
    mix.modalities = modalities;
    mix.image_size = image_size;
    mix.proportions.assign(modalities, 1.0 / modalities);
    // Frequency bands spread geometrically below Nyquist; the remaining
    // style factors vary alongside so every pair of modalities differs.
    const double fmin = 2.0;
    const double fmax = std::min(14.0, image_size / 2.0 - 2.0);
    for (int d = 0; d < modalities; ++d) {
        const double t = modalities == 1 ? 0.0 : static_cast<double>(d) / (modalities - 1);
        ModalityStyle s;
        s.band_freq = modalities == 1 ? fmin : fmin * std::pow(fmax / fmin, t);
        s.band_amp = 0.22;
        s.noise_amp = 0.02 + 0.02 * (d % 4);
        s.gamma = 0.8 + 0.25 * (d % 4);
        s.offset = 0.05 * ((d % 4) - 1);
        mix.styles.push_back(s);
    }
    return mix;
}

Sample render_sample(const ModalityMixture &mix, int modality, int semantic, Rng &rng) {
    const int W = mix.image_size;
    const auto &style = mix.styles[modality];

    Sample s;
    s.modality = modality;
    s.semantic = semantic;
    // Shape latents: position jitter +/-25% of the image size, mild scale jitter.
    s.center_x = W / 2.0 + (rng.uniform() * 2.0 - 1.0) * 0.25 * W;
    s.center_y = W / 2.0 + (rng.uniform() * 2.0 - 1.0) * 0.25 * W;
    s.radius = (0.20 + 0.08 * rng.uniform()) * W;

    double theta[kGratings], phase[kGratings], amp[kGratings];
    for (int g = 0; g < kGratings; ++g) {
        theta[g] = rng.uniform() * std::numbers::pi;
        phase[g] = rng.uniform() * 2.0 * std::numbers::pi;
        amp[g] = (0.5 + 0.5 * rng.uniform()) / kGratings;
    }

    s.image.resize(static_cast<size_t>(W) * W);
    const double freq_scale = 2.0 * std::numbers::pi * style.band_freq / W;
    for (int y = 0; y < W; ++y)
        for (int x = 0; x < W; ++x) {
            double bg = 0.0;
            for (int g = 0; g < kGratings; ++g)
                bg += amp[g] * std::cos(freq_scale * (x * std::cos(theta[g]) + y * std::sin(theta[g])) +
                                        phase[g]);
            double v = 0.5 + style.band_amp * bg + style.noise_amp * rng.normal();
            const double m =
                coverage(shape_distance(static_cast<ShapeClass>(semantic), x + 0.5 - s.center_x,
                                        y + 0.5 - s.center_y, s.radius));
            v = v * (1.0 - kShapeBlend * m) + kShapeBlend * m * kShapeLevel;
            v = std::pow(clip01(v), style.gamma);
            s.image[static_cast<size_t>(y) * W + x] = clip01(v + style.offset);
        }
    return s;
}

std::vector<Sample> sample_batch(const ModalityMixture &mix, int batch, Rng &rng) {
    if (batch < 1) throw ContractError("sample_batch: batch must be >= 1");
    mix.validate();
    std::vector<Sample> out;
    out.reserve(batch);
    for (int b = 0; b < batch; ++b) {
        const int d = rng.categorical(mix.proportions);
        const int sem = rng.uniform_int(mix.shape_classes);
        out.push_back(render_sample(mix, d, sem, rng));
    }
    return out;
}

std::vector<double> band_powers(const ModalityMixture &mix, std::span<const double> image) {
    const int W = mix.image_size;
    if (static_cast<int>(image.size()) != W * W)
        throw ShapeError("band_powers: image size vs mixture image_size");
    double mean = 0;
    for (double v : image) mean += v;
    mean /= image.size();

    std::vector<double> powers(mix.modalities, 0.0);
    for (int d = 0; d < mix.modalities; ++d) {
        const double f = 2.0 * std::numbers::pi * mix.styles[d].band_freq / W;
        double acc = 0;
        for (int j = 0; j < kOrientations; ++j) {
            const double th = j * std::numbers::pi / kOrientations;
            const double kx = f * std::cos(th), ky = f * std::sin(th);
            double re = 0, im = 0;
            for (int y = 0; y < W; ++y)
                for (int x = 0; x < W; ++x) {
                    const double v = image[static_cast<size_t>(y) * W + x] - mean;
                    const double ph = kx * x + ky * y;
                    re += v * std::cos(ph);
                    im -= v * std::sin(ph);
                }
            acc += (re * re + im * im);
        }
        powers[d] = acc / (kOrientations * static_cast<double>(W) * W);
    }
    return powers;
}

int classify_modality_spectral(const ModalityMixture &mix, std::span<const double> image) {
    const auto powers = band_powers(mix, image);
    return static_cast<int>(std::max_element(powers.begin(), powers.end()) - powers.begin());
}

double modality_separability_check(const ModalityMixture &mix, int n_per_modality, Rng &rng) {
    mix.validate();
    if (mix.modalities == 1) return 1.0;
    if (n_per_modality < 100)
        throw ContractError("modality_separability_check needs n >= 100 per modality");
    int correct = 0, total = 0;
    for (int d = 0; d < mix.modalities; ++d)
        for (int i = 0; i < n_per_modality; ++i) {
            const int sem = rng.uniform_int(mix.shape_classes);
            const Sample s = render_sample(mix, d, sem, rng);
            if (classify_modality_spectral(mix, s.image) == d) ++correct;
            ++total;
        }
    return static_cast<double>(correct) / total;
}

void write_pgm(const std::string &path, std::span<const double> image, int width, int height) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    f << "P5\n" << width << " " << height << "\n255\n";
    for (double v : image) {
        const int g = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        f.put(static_cast<char>(g));
    }
}

}  // namespace dex
