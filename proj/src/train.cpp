#include "nemo/train.hpp"

#include <cmath>
#include <numbers>

#include "nemo/rng.hpp"

namespace nemo {

ModelConfig toy_profile() {
    ModelConfig c;
    c.profile = "toy";
    c.image_size = 16;
    c.channels = 32;
    c.groups = 8;
    c.blocks = {{32, true}, {32, true}, {48, false}, {64, false}};
    return c;
}

ModelConfig tiny_profile() {
    ModelConfig c;
    c.profile = "tiny";
    c.image_size = 8;
    c.channels = 16;
    c.groups = 4;
    c.vocab = 32;
    c.text_width = 16;
    c.time_width = 16;
    c.time_hidden = 32;
    c.blocks = {{16, true}, {16, false}};
    return c;
}

ModelConfig profile_by_name(const std::string& name) {
    if (name == "toy") return toy_profile();
    if (name == "tiny") return tiny_profile();
    throw DomainError("unknown model profile '" + name + "'");
}

TrainConfig TrainConfig::for_profile(const std::string& profile) {
    TrainConfig t;
    t.model = profile_by_name(profile);
    t.vocab.size = t.model.vocab;
    t.vocab.pad = t.model.pad_token;
    t.data.image_channels = t.model.image_channels;
    t.data.image_size = t.model.image_size;
    if (profile == "toy") t.value_l1 = 0.02;
    if (profile == "tiny") {
        t.vocab.rare_tokens = 8;
        t.data.unique_pairs = 1024;
        t.data.memorized_prompts = 2;
        t.steps = 1500;
    }
    return t;
}

namespace {

struct Adam {
    Weights m, v;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int t = 0;

    explicit Adam(const Weights& like) : m(like.zeros_like()), v(like.zeros_like()) {}

    void step(Weights& params, Weights& grad, double lr) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, t);
        const double c2 = 1.0 - std::pow(beta2, t);
        std::vector<Matrix*> p, g, mm, vv;
        params.visit([&](const std::string&, Matrix& x) { p.push_back(&x); });
        grad.visit([&](const std::string&, Matrix& x) { g.push_back(&x); });
        m.visit([&](const std::string&, Matrix& x) { mm.push_back(&x); });
        v.visit([&](const std::string&, Matrix& x) { vv.push_back(&x); });
        for (std::size_t i = 0; i < p.size(); ++i) {
            mm[i]->array() = beta1 * mm[i]->array() + (1.0 - beta1) * g[i]->array();
            vv[i]->array() = beta2 * vv[i]->array() + (1.0 - beta2) * g[i]->array().square();
            p[i]->array() -= lr * (mm[i]->array() / c1) / ((vv[i]->array() / c2).sqrt() + eps);
        }
    }
};

double grad_norm(const Weights& g) {
    double sq = 0.0;
    g.visit([&](const std::string&, const Matrix& m) { sq += m.squaredNorm(); });
    return std::sqrt(sq);
}

double learning_rate_at(const TrainConfig& c, int step) {
    if (step < c.warmup_steps) return c.learning_rate * (step + 1) / c.warmup_steps;
    const double frac = static_cast<double>(step - c.warmup_steps) / std::max(1, c.steps - c.warmup_steps);
    return c.min_learning_rate +
           0.5 * (c.learning_rate - c.min_learning_rate) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace

TrainResult train_model(const TrainConfig& config, const TrainProgress& progress) {
    if (config.steps < 1 || config.batch_size < 1) throw DomainError("train: steps and batch size must be positive");
    if (config.data.duplication < 1) throw DomainError("train: duplication factor must be >= 1");
    if (config.vocab.size != config.model.vocab) throw DomainError("train: vocabulary size differs from model");

    TrainResult result{init_model(config.model, config.seed), make_dataset(config.data, config.vocab), {}, 0.0, true};
    DenoiserModel& model = result.model;
    const Dataset& ds = result.dataset;
    const ModelConfig& mc = model.config;

    GaussianSource rng(config.seed * 0x9e3779b97f4a7c15ULL + 1);
    Adam adam(model.weights);
    Weights grad = model.weights.zeros_like();

    double window_sum = 0.0;
    int window_count = 0;
    double log_sum = 0.0;
    int log_count = 0;
    for (int step = 0; step < config.steps; ++step) {
        grad.visit([](const std::string&, Matrix& m) { m.setZero(); });
        double batch_loss = 0.0;
        for (int b = 0; b < config.batch_size; ++b) {
            const auto& pair = ds.pairs[ds.expanded[rng.below(ds.expanded.size())]];
            TrainingExample ex;
            ex.x0 = pair.image;
            ex.timestep = static_cast<int>(rng.below(model.schedule.steps()));
            ex.noise = gaussian_image(mc.image_channels, mc.image_size, mc.image_size, rng);
            ex.tokens = pair.prompt.tokens;
            batch_loss += loss_and_gradient(model, ex, grad, 1.0 / config.batch_size);
            if (config.value_l1 > 0.0)
                value_sparsity_penalty(model, ex.tokens, &grad, config.value_l1 / config.batch_size);
        }
        batch_loss /= config.batch_size;

        const double norm = grad_norm(grad);
        if (config.grad_clip > 0.0 && norm > config.grad_clip) {
            const double s = config.grad_clip / norm;
            grad.visit([&](const std::string&, Matrix& m) { m *= s; });
        }
        const double lr = learning_rate_at(config, step);
        adam.step(model.weights, grad, lr);

        if (step >= config.steps - config.loss_window) {
            window_sum += batch_loss;
            ++window_count;
        }
        log_sum += batch_loss;
        ++log_count;
        if ((step + 1) % config.log_every == 0 || step + 1 == config.steps) {
            TrainLogEntry e{step + 1, log_sum / log_count, lr};
            result.log.push_back(e);
            if (progress) progress(e);
            log_sum = 0.0;
            log_count = 0;
        }
    }
    result.final_loss = window_count > 0 ? window_sum / window_count : 0.0;
    result.converged = result.final_loss <= config.loss_ceiling;
    return result;
}

DenoiserModel train(const TrainConfig& config) {
    TrainResult r = train_model(config);
    if (!r.converged)
        throw NonConvergenceError("training loss " + std::to_string(r.final_loss) + " exceeds ceiling " +
                                      std::to_string(config.loss_ceiling),
                                  r.final_loss);
    return std::move(r.model);
}

}  // namespace nemo
