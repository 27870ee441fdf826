#include "nemo/rng.hpp"

#include <cmath>
#include <numbers>

namespace nemo {

double GaussianSource::uniform() {
    // 53 random bits, shifted off zero.
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

double GaussianSource::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::uint64_t GaussianSource::below(std::uint64_t n) {
    // Rejection sampling keeps the result unbiased and platform independent.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
        r = engine_();
    } while (r >= limit);
    return r % n;
}

LatentImage gaussian_image(int channels, int height, int width, GaussianSource& source) {
    LatentImage img(channels, height, width);
    for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data.data()[i] = source.normal();
    return img;
}

LatentImage initial_noise(int channels, int height, int width, std::uint64_t seed) {
    GaussianSource source(seed);
    return gaussian_image(channels, height, width, source);
}

}  // namespace nemo
