#pragma once

#include <cstdint>
#include <vector>

#include "nemo/model.hpp"

namespace nemo {

// Disjoint seed streams: localization (noise differences, detection,
// calibration), evaluation (metrics) and random baselines.
struct SeedRegistry {
    std::vector<std::uint64_t> localization;
    std::vector<std::uint64_t> evaluation;
    std::uint64_t baseline_base = 201;

    static SeedRegistry defaults();
    bool disjoint() const;
};

// First-step noise difference eps_theta(x_T, T, y) - x_T, min-max scaled to
// [0, 1]. A constant difference maps to 0.5 everywhere.
struct NoiseDifference {
    LatentImage delta;
    std::uint64_t seed = 0;
};

struct MemThreshold {
    double tau_mem = 0.0;
    double mean = 0.0;
    double std = 0.0;
    double sigma_multiplier = 1.0;
    int holdout_size = 0;
};

inline constexpr int kSsimWindow = 8;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Structural similarity averaged over all 8x8 windows (stride 1) and channels.
// Window statistics use population moments. Dynamic range R = 1.
double ssim(const LatentImage& a, const LatentImage& b);
inline double ssim(const NoiseDifference& a, const NoiseDifference& b) { return ssim(a.delta, b.delta); }

LatentImage min_max_normalize(const LatentImage& x);

// Unfiltered noise differences, one per seed, in seed order.
std::vector<NoiseDifference> raw_noise_differences(const PromptEmbedding& prompt, const NeuronMask& mask,
                                                   const DenoiserModel& model,
                                                   const std::vector<std::uint64_t>& seeds);

// Drops every difference whose best SSIM against the other differences is
// below `tau_mem`. All comparisons use the unfiltered list.
std::vector<NoiseDifference> filter_noise_differences(const std::vector<NoiseDifference>& deltas, double tau_mem);

// Noise differences with `deactivated` switched off, filtered at `tau_mem`.
// May be empty.
std::vector<NoiseDifference> noise_differences(const PromptEmbedding& prompt, const NeuronSet& deactivated,
                                               const DenoiserModel& model, double tau_mem,
                                               const std::vector<std::uint64_t>& seeds);
std::vector<NoiseDifference> noise_differences(const PromptEmbedding& prompt, const NeuronMask& mask,
                                               const DenoiserModel& model, double tau_mem,
                                               const std::vector<std::uint64_t>& seeds);

// Maximum SSIM over all cross pairs. Throws DomainError on an empty list.
double memorization_score(const std::vector<NoiseDifference>& a, const std::vector<NoiseDifference>& b);

// Maximum SSIM over distinct pairs of one list. Needs two elements.
double self_memorization_score(const std::vector<NoiseDifference>& deltas);

// tau_mem = mean + multiplier * std over holdout prompts of the unfiltered
// maximum pairwise SSIM (population std).
MemThreshold calibrate_threshold(const DenoiserModel& model, const std::vector<PromptEmbedding>& holdout,
                                 const std::vector<std::uint64_t>& seeds, double sigma_multiplier = 1.0);

inline constexpr int kMinHoldoutPrompts = 20;

struct Detection {
    bool memorized = false;
    double score = 0.0;
};

Detection detect_memorized(const PromptEmbedding& prompt, const DenoiserModel& model, const MemThreshold& tau,
                           const std::vector<std::uint64_t>& seeds);

}  // namespace nemo
