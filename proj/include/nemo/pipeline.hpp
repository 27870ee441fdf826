#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nemo/config.hpp"
#include "nemo/data.hpp"

namespace nemo {

// Holdout prompts for threshold calibration and activation statistics.
std::vector<Prompt> calibration_prompts(const RunConfig& config);
// Fresh holdout prompts for evaluation, disjoint stream from calibration.
std::vector<Prompt> evaluation_prompts(const RunConfig& config);

std::vector<PromptEmbedding> embed_all(const DenoiserModel& model, const std::vector<Prompt>& prompts);

struct Calibration {
    MemThreshold tau;
    ActivationStats stats;
    std::vector<std::string> prompt_ids;
};

Calibration calibrate(const RunConfig& config, const DenoiserModel& model);

nlohmann::json to_json(const Calibration& c);
Calibration calibration_from_json(const nlohmann::json& j);

struct ResolvedPrompt {
    Prompt prompt;
    std::optional<LatentImage> training_image;
    bool duplicated = false;
};

// Looks up "mem-i", "train-i" and "holdout-<seed>-<i>" ids. Throws
// DomainError for unknown ids.
ResolvedPrompt resolve_prompt(const RunConfig& config, const Dataset& dataset, const std::string& id);

std::vector<std::string> memorized_ids(const Dataset& dataset);

}  // namespace nemo
