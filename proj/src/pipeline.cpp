#include "nemo/pipeline.hpp"

#include <charconv>

namespace nemo {

std::vector<Prompt> calibration_prompts(const RunConfig& config) {
    return holdout_prompts(config.train.vocab, config.calibration_prompts, config.calibration_seed);
}

std::vector<Prompt> evaluation_prompts(const RunConfig& config) {
    return holdout_prompts(config.train.vocab, config.evaluation_prompts, config.evaluation_seed);
}

std::vector<PromptEmbedding> embed_all(const DenoiserModel& model, const std::vector<Prompt>& prompts) {
    std::vector<PromptEmbedding> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts) out.push_back(model.embed(p.tokens));
    return out;
}

Calibration calibrate(const RunConfig& config, const DenoiserModel& model) {
    const auto prompts = calibration_prompts(config);
    const auto embedded = embed_all(model, prompts);
    Calibration c;
    c.tau = calibrate_threshold(model, embedded, config.seeds.localization, config.sigma_multiplier);
    c.stats = compute_activation_stats(model, embedded);
    for (const auto& p : prompts) c.prompt_ids.push_back(p.id);
    return c;
}

nlohmann::json to_json(const Calibration& c) {
    return {{"threshold", to_json(c.tau)}, {"activation_stats", to_json(c.stats)}, {"holdout_prompts", c.prompt_ids}};
}

Calibration calibration_from_json(const nlohmann::json& j) {
    try {
        Calibration c;
        c.tau = threshold_from_json(j.at("threshold"));
        c.stats = activation_stats_from_json(j.at("activation_stats"));
        c.prompt_ids = j.at("holdout_prompts").get<std::vector<std::string>>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("threshold record: ") + e.what());
    }
}

ResolvedPrompt resolve_prompt(const RunConfig& config, const Dataset& dataset, const std::string& id) {
    if (const TrainingPair* p = dataset.find(id)) return {p->prompt, p->image, p->copies > 1};
    // holdout-<seed>-<index>
    constexpr std::string_view prefix = "holdout-";
    if (id.starts_with(prefix)) {
        const auto dash = id.find('-', prefix.size());
        std::uint64_t seed = 0;
        int index = -1;
        if (dash != std::string::npos) {
            const char* b = id.data() + prefix.size();
            const auto r1 = std::from_chars(b, id.data() + dash, seed);
            const auto r2 = std::from_chars(id.data() + dash + 1, id.data() + id.size(), index);
            if (r1.ec == std::errc{} && r1.ptr == id.data() + dash && r2.ec == std::errc{} &&
                r2.ptr == id.data() + id.size() && index >= 0 && index < 100000) {
                auto prompts = holdout_prompts(config.train.vocab, index + 1, seed);
                return {prompts.back(), std::nullopt, false};
            }
        }
    }
    throw DomainError("unknown prompt id '" + id + "'");
}

std::vector<std::string> memorized_ids(const Dataset& dataset) {
    std::vector<std::string> ids;
    for (int i = 0; i < dataset.memorized_count; ++i) ids.push_back(dataset.pairs[i].prompt.id);
    return ids;
}

}  // namespace nemo
