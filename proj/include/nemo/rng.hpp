#pragma once

#include <cstdint>
#include <random>

#include "nemo/tensor.hpp"

namespace nemo {

// Portable seeded normal generator. std::normal_distribution is implementation
// defined, so draws are built from raw mt19937_64 output with Box-Muller.
class GaussianSource {
public:
    explicit GaussianSource(std::uint64_t seed) : engine_(seed) {}

    double uniform();  // in (0, 1)
    double normal();
    std::uint64_t bits() { return engine_(); }
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

LatentImage gaussian_image(int channels, int height, int width, GaussianSource& source);

// Initial x_T for a seed. Identical seeds give bit-identical images.
LatentImage initial_noise(int channels, int height, int width, std::uint64_t seed);

}  // namespace nemo
