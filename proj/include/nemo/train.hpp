#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nemo/data.hpp"
#include "nemo/model.hpp"

namespace nemo {

ModelConfig toy_profile();
ModelConfig tiny_profile();
ModelConfig profile_by_name(const std::string& name);

struct TrainConfig {
    ModelConfig model = toy_profile();
    Vocabulary vocab;
    DatasetConfig data;
    double learning_rate = 2e-3;
    double min_learning_rate = 2e-4;  // cosine floor
    int warmup_steps = 100;
    int steps = 3000;
    int batch_size = 32;
    double grad_clip = 1.0;
    double value_l1 = 0.0;  // weight of value_sparsity_penalty
    std::uint64_t seed = 1234;
    // Mean loss over the final `loss_window` steps must not exceed this.
    double loss_ceiling = 0.2;
    int loss_window = 100;
    int log_every = 100;

    // Matching dataset shape, vocabulary and resolution for a profile.
    static TrainConfig for_profile(const std::string& profile);
};

struct TrainLogEntry {
    int step = 0;
    double loss = 0.0;
    double learning_rate = 0.0;
};

struct TrainResult {
    DenoiserModel model;
    Dataset dataset;
    std::vector<TrainLogEntry> log;
    double final_loss = 0.0;
    bool converged = true;
};

using TrainProgress = std::function<void(const TrainLogEntry&)>;

// Adam on the noise-prediction MSE. Single-threaded and deterministic:
// identical configs give bit-identical weights.
TrainResult train_model(const TrainConfig& config, const TrainProgress& progress = {});

// Same as train_model but throws NonConvergenceError past the loss ceiling.
DenoiserModel train(const TrainConfig& config);

}  // namespace nemo
