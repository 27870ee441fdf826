#pragma once

#include <algorithm>

#include "nemo/mem_score.hpp"
#include "nemo/model.hpp"
#include "nemo/rng.hpp"
#include "nemo/train.hpp"

namespace nemo::testing {

// Small enough for exhaustive finite differences.
inline ModelConfig miniature_config() {
    ModelConfig c;
    c.profile = "miniature";
    c.image_channels = 2;
    c.image_size = 4;
    c.channels = 4;
    c.groups = 2;
    c.vocab = 6;
    c.prompt_length = 3;
    c.text_width = 3;
    c.time_width = 4;
    c.time_hidden = 4;
    c.blocks = {{3, true}, {2, false}};
    c.diffusion_steps = 10;
    c.beta_start = 0.01;
    c.beta_end = 0.2;
    c.spacing = BetaSpacing::linear;
    return c;
}

// Random weights everywhere (init_model keeps biases at zero).
inline DenoiserModel randomized_model(const ModelConfig& config, std::uint64_t seed) {
    DenoiserModel m = init_model(config, seed);
    GaussianSource rng(seed + 17);
    m.weights.visit([&](const std::string&, Matrix& w) {
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] += 0.3 * rng.normal();
    });
    return m;
}

// Direct SSIM: for every 8x8 window, compute the moments by explicit loops
// and evaluate the formula. No prefix sums, no shortcuts.
inline double reference_ssim(const LatentImage& a, const LatentImage& b) {
    const int w = std::min({8, a.height, a.width});
    double total = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        double channel = 0.0;
        int windows = 0;
        for (int y0 = 0; y0 + w <= a.height; ++y0)
            for (int x0 = 0; x0 + w <= a.width; ++x0, ++windows) {
                double ma = 0, mb = 0;
                for (int y = y0; y < y0 + w; ++y)
                    for (int x = x0; x < x0 + w; ++x) {
                        ma += a.at(c, y, x);
                        mb += b.at(c, y, x);
                    }
                ma /= w * w;
                mb /= w * w;
                double va = 0, vb = 0, cov = 0;
                for (int y = y0; y < y0 + w; ++y)
                    for (int x = x0; x < x0 + w; ++x) {
                        const double da = a.at(c, y, x) - ma, db = b.at(c, y, x) - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                va /= w * w;
                vb /= w * w;
                cov /= w * w;
                const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
                channel += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        total += channel / windows;
    }
    return total / a.channels;
}

inline LatentImage uniform_image(int channels, int size, GaussianSource& rng) {
    LatentImage img(channels, size, size);
    for (Eigen::Index i = 0; i < img.size(); ++i) img.data(i) = rng.uniform();
    return img;
}

}  // namespace nemo::testing
