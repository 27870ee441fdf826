#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "nemo/localizer.hpp"
#include "nemo/mem_score.hpp"
#include "nemo/metrics.hpp"
#include "nemo/oracle.hpp"
#include "nemo/train.hpp"

namespace nemo {

// Everything a pipeline run depends on. Serialized as one JSON document;
// missing keys keep the profile defaults.
struct RunConfig {
    std::string profile = "toy";
    TrainConfig train = TrainConfig::for_profile("toy");
    SeedRegistry seeds = SeedRegistry::defaults();
    double sigma_multiplier = 1.0;  // tau_mem = mean + c * std
    int calibration_prompts = 30;
    std::uint64_t calibration_seed = 99;
    LocalizerConfig localizer;
    double mitigation_scale = 0.0;
    int evaluation_prompts = 20;
    std::uint64_t evaluation_seed = 555;
    int sampling_steps = 50;
    int random_trials = 10;
    std::string out = "runs";

    static RunConfig for_profile(const std::string& profile);
    // Throws DomainError on inconsistent values (overlapping seed registries, ...).
    void validate() const;
};

nlohmann::json to_json(const RunConfig& config);
// Starts from the defaults of the "profile" key and applies every other key.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const SeedRegistry& seeds);
SeedRegistry seed_registry_from_json(const nlohmann::json& j);

// Hex FNV-1a of the canonical JSON dump.
std::string config_hash(const RunConfig& config);

nlohmann::json to_json(const NeuronId& id);
nlohmann::json to_json(const NeuronSet& set);
NeuronSet neuron_set_from_json(const nlohmann::json& j);

nlohmann::json to_json(const MemThreshold& tau);
MemThreshold threshold_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ActivationStats& stats);
ActivationStats activation_stats_from_json(const nlohmann::json& j);

nlohmann::json to_json(const SelectionResult& result);

nlohmann::json to_json(const OracleCertificate& cert);
OracleCertificate certificate_from_json(const nlohmann::json& j);

}  // namespace nemo
