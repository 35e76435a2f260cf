#pragma once

#include <span>
#include <string>
#include <vector>

#include "dex/rng.hpp"

// Synthetic multi-modality image source. Each modality d carries its own
// rendering style (band-limited background frequency, noise level, gamma,
// brightness offset) while the semantic factor (shape class, position,
// scale) is drawn independently of the modality. Samples are a pure
// function of (config, rng state).

namespace dex {

struct ModalityStyle {
    double band_freq = 4.0;   // background grating frequency, cycles per image
    double band_amp = 0.2;    // grating amplitude
    double noise_amp = 0.04;  // white-noise amplitude
    double gamma = 1.0;       // contrast curve
    double offset = 0.0;      // brightness shift
};

enum class ShapeClass { Disc = 0, Square = 1, Cross = 2, Ring = 3 };
constexpr int kShapeClassCount = 4;
std::string shape_class_name(int semantic);

struct ModalityMixture {
    int modalities = 4;
    std::vector<double> proportions;     // rho, length D, sums to 1
    std::vector<ModalityStyle> styles;   // length D, pairwise distinct
    int shape_classes = 4;               // 1..4, drawn uniformly
    int image_size = 32;
    uint64_t seed = 0;                   // stream seed for generation commands

    void validate() const;
    // Frequency-separated default styles for D modalities.
    static ModalityMixture defaults(int modalities = 4, int image_size = 32);
};

struct Sample {
    std::vector<double> image;  // H*W grayscale in [0,1]
    int modality = 0;
    int semantic = 0;
    double center_x = 0, center_y = 0, radius = 0;  // shape latents
};

// Draw modality ~ rho, semantic ~ uniform, render.
std::vector<Sample> sample_batch(const ModalityMixture &mix, int batch, Rng &rng);

// Render with the factors fixed (stratified generation for probes/tests).
Sample render_sample(const ModalityMixture &mix, int modality, int semantic, Rng &rng);

// Mean spectral power of the (mean-removed) image in each modality's
// frequency band, probed over 8 orientations.
std::vector<double> band_powers(const ModalityMixture &mix, std::span<const double> image);

// argmax of band_powers.
int classify_modality_spectral(const ModalityMixture &mix, std::span<const double> image);

// Accuracy of the fixed spectral statistic on n freshly generated samples
// per modality. D == 1 is vacuously 1.0.
double modality_separability_check(const ModalityMixture &mix, int n_per_modality, Rng &rng);

// 8-bit PGM writer for quick visual inspection.
void write_pgm(const std::string &path, std::span<const double> image, int width, int height);

}  // namespace dex
