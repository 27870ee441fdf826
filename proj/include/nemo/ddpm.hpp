#pragma once

#include <cstdint>
#include <vector>

#include "nemo/tensor.hpp"

namespace nemo {

struct DenoiserModel;
struct PromptEmbedding;
class NeuronMask;
struct Ablation;

enum class BetaSpacing {
    linear,         // beta linear in t
    scaled_linear,  // sqrt(beta) linear in t
};

// Variance schedule. Index t is 0-based; model_timestep[t] is the training
// timestep fed to the network (differs from t only for respaced schedules).
struct Schedule {
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<int> model_timestep;

    int steps() const { return static_cast<int>(beta.size()); }
};

Schedule make_schedule(int steps, double beta_start, double beta_end, BetaSpacing spacing = BetaSpacing::linear);

// Keeps `steps` evenly strided timesteps (always including the last one) and
// re-derives alpha so that alpha_bar matches the parent at every kept step.
Schedule respace(const Schedule& parent, int steps);

// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
LatentImage add_noise(const LatentImage& x0, const LatentImage& eps, int t, const Schedule& schedule);

// Deterministic reverse step:
// (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_t)
LatentImage denoise_step(const LatentImage& x_t, const LatentImage& eps_pred, int t, const Schedule& schedule);

// Runs `steps` reverse steps on a respaced copy of the model's schedule,
// starting from initial_noise(seed).
LatentImage sample(const DenoiserModel& model, const PromptEmbedding& prompt, std::uint64_t seed, int steps,
                   const NeuronMask& mask, const Ablation* ablation = nullptr);

}  // namespace nemo
