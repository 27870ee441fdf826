#include "nemo/mem_score.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nemo/parallel.hpp"
#include "nemo/rng.hpp"

namespace nemo {

SeedRegistry SeedRegistry::defaults() {
    SeedRegistry r;
    for (std::uint64_t s = 1; s <= 10; ++s) r.localization.push_back(s);
    for (std::uint64_t s = 101; s <= 110; ++s) r.evaluation.push_back(s);
    r.baseline_base = 201;
    return r;
}

bool SeedRegistry::disjoint() const {
    for (auto s : localization)
        if (std::find(evaluation.begin(), evaluation.end(), s) != evaluation.end()) return false;
    const auto below_baseline = [&](std::uint64_t s) { return s < baseline_base; };
    return std::all_of(localization.begin(), localization.end(), below_baseline) &&
           std::all_of(evaluation.begin(), evaluation.end(), below_baseline);
}

namespace {

// Inclusive prefix sums with a zero border: s(y + 1, x + 1) = sum over [0..y] x [0..x].
Matrix integral(const Eigen::Ref<const Eigen::ArrayXXd>& img) {
    Matrix s = Matrix::Zero(img.rows() + 1, img.cols() + 1);
    for (Eigen::Index y = 0; y < img.rows(); ++y)
        for (Eigen::Index x = 0; x < img.cols(); ++x)
            s(y + 1, x + 1) = img(y, x) + s(y, x + 1) + s(y + 1, x) - s(y, x);
    return s;
}

double box(const Matrix& s, int y, int x, int w) { return s(y + w, x + w) - s(y, x + w) - s(y + w, x) + s(y, x); }

}  // namespace

double ssim(const LatentImage& a, const LatentImage& b) {
    require_same_shape(a, b, "ssim");
    if (a.size() == 0) throw ShapeError("ssim: empty image");
    // Identical inputs are exactly 1; prefix-sum rounding could otherwise clamp a variance.
    if (a.data == b.data) return 1.0;
    const int w = std::min({kSsimWindow, a.height, a.width});
    const double n = static_cast<double>(w) * w;
    const int ny = a.height - w + 1;
    const int nx = a.width - w + 1;

    double total = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        // Row-major view (height x width) of channel c.
        Eigen::ArrayXXd ia(a.height, a.width), ib(a.height, a.width);
        for (int y = 0; y < a.height; ++y)
            for (int x = 0; x < a.width; ++x) {
                ia(y, x) = a.at(c, y, x);
                ib(y, x) = b.at(c, y, x);
            }
        const Matrix sa = integral(ia), sb = integral(ib);
        const Matrix saa = integral(ia.square()), sbb = integral(ib.square()), sab = integral(ia * ib);
        double channel = 0.0;
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const double mu_a = box(sa, y, x, w) / n;
                const double mu_b = box(sb, y, x, w) / n;
                const double var_a = std::max(0.0, box(saa, y, x, w) / n - mu_a * mu_a);
                const double var_b = std::max(0.0, box(sbb, y, x, w) / n - mu_b * mu_b);
                const double cov = box(sab, y, x, w) / n - mu_a * mu_b;
                channel += ((2 * mu_a * mu_b + kSsimC1) * (2 * cov + kSsimC2)) /
                           ((mu_a * mu_a + mu_b * mu_b + kSsimC1) * (var_a + var_b + kSsimC2));
            }
        total += channel / (static_cast<double>(ny) * nx);
    }
    return std::clamp(total / a.channels, -1.0, 1.0);
}

LatentImage min_max_normalize(const LatentImage& x) {
    LatentImage out = x;
    const double lo = x.data.minCoeff();
    const double hi = x.data.maxCoeff();
    if (hi - lo <= 0.0)
        out.data.setConstant(0.5);
    else
        out.data = (x.data.array() - lo) / (hi - lo);
    return out;
}

std::vector<NoiseDifference> raw_noise_differences(const PromptEmbedding& prompt, const NeuronMask& mask,
                                                   const DenoiserModel& model,
                                                   const std::vector<std::uint64_t>& seeds) {
    const auto& cfg = model.config;
    const int last = model.schedule.steps() - 1;
    std::vector<NoiseDifference> out(seeds.size());
    parallel_for(static_cast<int>(seeds.size()), [&](int i) {
        const LatentImage x_T = initial_noise(cfg.image_channels, cfg.image_size, cfg.image_size, seeds[i]);
        const LatentImage eps = predict_noise(model, x_T, model.schedule.model_timestep[last], prompt, mask);
        LatentImage delta = eps;
        delta.data -= x_T.data;
        out[i] = NoiseDifference{min_max_normalize(delta), seeds[i]};
    });
    return out;
}

std::vector<NoiseDifference> filter_noise_differences(const std::vector<NoiseDifference>& deltas, double tau_mem) {
    const std::size_t n = deltas.size();
    std::vector<double> best(n, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double s = ssim(deltas[i], deltas[j]);
            best[i] = std::max(best[i], s);
            best[j] = std::max(best[j], s);
        }
    std::vector<NoiseDifference> kept;
    for (std::size_t i = 0; i < n; ++i)
        if (!(best[i] < tau_mem)) kept.push_back(deltas[i]);
    return kept;
}

std::vector<NoiseDifference> noise_differences(const PromptEmbedding& prompt, const NeuronMask& mask,
                                               const DenoiserModel& model, double tau_mem,
                                               const std::vector<std::uint64_t>& seeds) {
    return filter_noise_differences(raw_noise_differences(prompt, mask, model, seeds), tau_mem);
}

std::vector<NoiseDifference> noise_differences(const PromptEmbedding& prompt, const NeuronSet& deactivated,
                                               const DenoiserModel& model, double tau_mem,
                                               const std::vector<std::uint64_t>& seeds) {
    return noise_differences(prompt, NeuronMask::deactivate(deactivated), model, tau_mem, seeds);
}

double memorization_score(const std::vector<NoiseDifference>& a, const std::vector<NoiseDifference>& b) {
    if (a.empty() || b.empty()) throw DomainError("memorization_score: empty noise-difference set");
    double best = -1.0;
    for (const auto& x : a)
        for (const auto& y : b) best = std::max(best, ssim(x, y));
    return best;
}

double self_memorization_score(const std::vector<NoiseDifference>& deltas) {
    if (deltas.size() < 2) throw DomainError("self_memorization_score: need at least two noise differences");
    double best = -1.0;
    for (std::size_t i = 0; i < deltas.size(); ++i)
        for (std::size_t j = i + 1; j < deltas.size(); ++j) best = std::max(best, ssim(deltas[i], deltas[j]));
    return best;
}

MemThreshold calibrate_threshold(const DenoiserModel& model, const std::vector<PromptEmbedding>& holdout,
                                 const std::vector<std::uint64_t>& seeds, double sigma_multiplier) {
    if (static_cast<int>(holdout.size()) < kMinHoldoutPrompts)
        throw DomainError("calibrate_threshold: need at least " + std::to_string(kMinHoldoutPrompts) +
                          " holdout prompts, got " + std::to_string(holdout.size()));
    std::vector<double> maxima;
    for (const auto& p : holdout) maxima.push_back(self_memorization_score(raw_noise_differences(p, {}, model, seeds)));
    MemThreshold t;
    t.holdout_size = static_cast<int>(holdout.size());
    t.sigma_multiplier = sigma_multiplier;
    double sum = 0.0;
    for (double m : maxima) sum += m;
    t.mean = sum / maxima.size();
    double sq = 0.0;
    for (double m : maxima) sq += (m - t.mean) * (m - t.mean);
    t.std = std::sqrt(sq / maxima.size());
    t.tau_mem = t.mean + sigma_multiplier * t.std;
    return t;
}

Detection detect_memorized(const PromptEmbedding& prompt, const DenoiserModel& model, const MemThreshold& tau,
                           const std::vector<std::uint64_t>& seeds) {
    Detection d;
    d.score = self_memorization_score(raw_noise_differences(prompt, {}, model, seeds));
    d.memorized = d.score >= tau.tau_mem;
    return d;
}

}  // namespace nemo
