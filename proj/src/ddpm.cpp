#include "nemo/ddpm.hpp"

#include <cmath>
#include <string>

#include "nemo/model.hpp"
#include "nemo/rng.hpp"

namespace nemo {

namespace {

void check_timestep(int t, const Schedule& schedule, const char* where) {
    if (t < 0 || t >= schedule.steps())
        throw DomainError(std::string(where) + ": timestep " + std::to_string(t) + " outside [0, " +
                          std::to_string(schedule.steps()) + ")");
}

}  // namespace

Schedule make_schedule(int steps, double beta_start, double beta_end, BetaSpacing spacing) {
    if (steps < 1) throw DomainError("make_schedule: steps must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw DomainError("make_schedule: require 0 < beta_start <= beta_end < 1");

    Schedule s;
    s.beta.resize(steps);
    s.alpha.resize(steps);
    s.alpha_bar.resize(steps);
    s.model_timestep.resize(steps);
    for (int t = 0; t < steps; ++t) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
        double beta;
        if (spacing == BetaSpacing::linear) {
            beta = beta_start + frac * (beta_end - beta_start);
        } else {
            const double root = std::sqrt(beta_start) + frac * (std::sqrt(beta_end) - std::sqrt(beta_start));
            beta = root * root;
        }
        s.beta[t] = beta;
        s.alpha[t] = 1.0 - beta;
        s.alpha_bar[t] = t == 0 ? s.alpha[0] : s.alpha_bar[t - 1] * s.alpha[t];
        s.model_timestep[t] = t;
    }
    return s;
}

Schedule respace(const Schedule& parent, int steps) {
    const int total = parent.steps();
    if (steps < 1 || steps > total) throw DomainError("respace: steps must lie in [1, parent steps]");

    Schedule s;
    s.beta.resize(steps);
    s.alpha.resize(steps);
    s.alpha_bar.resize(steps);
    s.model_timestep.resize(steps);
    for (int i = 0; i < steps; ++i) {
        const long long kept = (static_cast<long long>(i + 1) * total + steps / 2) / steps - 1;
        const int t = static_cast<int>(kept);
        s.model_timestep[i] = parent.model_timestep[t];
        s.alpha_bar[i] = parent.alpha_bar[t];
        s.alpha[i] = i == 0 ? s.alpha_bar[0] : s.alpha_bar[i] / s.alpha_bar[i - 1];
        s.beta[i] = 1.0 - s.alpha[i];
    }
    return s;
}

LatentImage add_noise(const LatentImage& x0, const LatentImage& eps, int t, const Schedule& schedule) {
    require_same_shape(x0, eps, "add_noise");
    check_timestep(t, schedule, "add_noise");
    const double ab = schedule.alpha_bar[t];
    LatentImage out(x0.channels, x0.height, x0.width);
    out.data = std::sqrt(ab) * x0.data + std::sqrt(1.0 - ab) * eps.data;
    return out;
}

LatentImage denoise_step(const LatentImage& x_t, const LatentImage& eps_pred, int t, const Schedule& schedule) {
    require_same_shape(x_t, eps_pred, "denoise_step");
    check_timestep(t, schedule, "denoise_step");
    const double a = schedule.alpha[t];
    const double ab = schedule.alpha_bar[t];
    LatentImage out(x_t.channels, x_t.height, x_t.width);
    if (ab >= 1.0) {
        // alpha_t == 1 (only reachable through hand-built schedules): nothing to remove.
        out.data = x_t.data / std::sqrt(a);
        return out;
    }
    const double coef = (1.0 - a) / std::sqrt(1.0 - ab);
    out.data = (x_t.data - coef * eps_pred.data) / std::sqrt(a);
    return out;
}

LatentImage sample(const DenoiserModel& model, const PromptEmbedding& prompt, std::uint64_t seed, int steps,
                   const NeuronMask& mask, const Ablation* ablation) {
    const auto& cfg = model.config;
    const Schedule sched = respace(model.schedule, steps);
    LatentImage x = initial_noise(cfg.image_channels, cfg.image_size, cfg.image_size, seed);
    for (int i = steps - 1; i >= 0; --i) {
        const LatentImage eps = predict_noise(model, x, sched.model_timestep[i], prompt, mask, ablation);
        x = denoise_step(x, eps, i, sched);
    }
    return x;
}

}  // namespace nemo
