#include "nemo/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "nemo/model_io.hpp"

namespace nemo {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw DomainError("config: '" + where + "' must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw DomainError("config: unknown key '" + key + "' in " + where);
}

template <class T>
void read(const json& j, const char* key, T& target) {
    if (j.contains(key)) target = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::for_profile(const std::string& profile) {
    RunConfig c;
    c.profile = profile;
    c.train = TrainConfig::for_profile(profile);
    return c;
}

void RunConfig::validate() const {
    if (!seeds.disjoint()) throw DomainError("config: seed registries overlap");
    if (seeds.localization.size() < 2 || seeds.evaluation.size() < 2)
        throw DomainError("config: seed registries need at least two seeds each");
    if (calibration_prompts < kMinHoldoutPrompts)
        throw DomainError("config: calibration needs at least " + std::to_string(kMinHoldoutPrompts) + " prompts");
    if (!(localizer.theta_min > 0.0) || !(localizer.theta_step > 0.0))
        throw DomainError("config: theta_min and theta_step must be positive");
    if (sampling_steps < 1 || random_trials < 1 || evaluation_prompts < 1)
        throw DomainError("config: evaluation counts must be positive");
    if (train.steps < 1 || train.batch_size < 1) throw DomainError("config: steps and batch size must be positive");
    train.model.validate();
}

json to_json(const SeedRegistry& s) {
    return {{"localization", s.localization}, {"evaluation", s.evaluation}, {"baseline_base", s.baseline_base}};
}

SeedRegistry seed_registry_from_json(const json& j) {
    check_keys(j, {"localization", "evaluation", "baseline_base"}, "seeds");
    SeedRegistry s = SeedRegistry::defaults();
    read(j, "localization", s.localization);
    read(j, "evaluation", s.evaluation);
    read(j, "baseline_base", s.baseline_base);
    return s;
}

json to_json(const RunConfig& c) {
    const TrainConfig& t = c.train;
    return {{"profile", c.profile},
            {"train",
             {{"steps", t.steps},
              {"batch_size", t.batch_size},
              {"learning_rate", t.learning_rate},
              {"min_learning_rate", t.min_learning_rate},
              {"warmup_steps", t.warmup_steps},
              {"grad_clip", t.grad_clip},
              {"value_l1", t.value_l1},
              {"seed", t.seed},
              {"loss_ceiling", t.loss_ceiling},
              {"loss_window", t.loss_window}}},
            {"data",
             {{"unique_pairs", t.data.unique_pairs},
              {"memorized_prompts", t.data.memorized_prompts},
              {"duplication", t.data.duplication},
              {"rare_per_prompt", t.data.rare_per_prompt},
              {"rare_tokens", t.vocab.rare_tokens},
              {"seed", t.data.seed}}},
            {"model", config_to_json(t.model)},
            {"seeds", to_json(c.seeds)},
            {"threshold",
             {{"sigma_multiplier", c.sigma_multiplier},
              {"prompts", c.calibration_prompts},
              {"prompt_seed", c.calibration_seed}}},
            {"localizer",
             {{"theta_start", c.localizer.theta_start},
              {"theta_step", c.localizer.theta_step},
              {"theta_min", c.localizer.theta_min}}},
            {"mitigation", {{"scale", c.mitigation_scale}}},
            {"evaluation",
             {{"prompts", c.evaluation_prompts},
              {"prompt_seed", c.evaluation_seed},
              {"sampling_steps", c.sampling_steps},
              {"random_trials", c.random_trials}}},
            {"out", c.out}};
}

RunConfig run_config_from_json(const json& j) {
    try {
        check_keys(j, {"profile", "train", "data", "model", "seeds", "threshold", "localizer", "mitigation",
                       "evaluation", "out"},
                   "config");
        RunConfig c = RunConfig::for_profile(j.value("profile", std::string("toy")));
        TrainConfig& t = c.train;
        if (j.contains("train")) {
            const json& s = j.at("train");
            check_keys(s, {"steps", "batch_size", "learning_rate", "min_learning_rate", "warmup_steps", "grad_clip",
                           "value_l1", "seed", "loss_ceiling", "loss_window"},
                       "train");
            read(s, "steps", t.steps);
            read(s, "batch_size", t.batch_size);
            read(s, "learning_rate", t.learning_rate);
            read(s, "min_learning_rate", t.min_learning_rate);
            read(s, "warmup_steps", t.warmup_steps);
            read(s, "grad_clip", t.grad_clip);
            read(s, "value_l1", t.value_l1);
            read(s, "seed", t.seed);
            read(s, "loss_ceiling", t.loss_ceiling);
            read(s, "loss_window", t.loss_window);
        }
        if (j.contains("data")) {
            const json& s = j.at("data");
            check_keys(s, {"unique_pairs", "memorized_prompts", "duplication", "rare_per_prompt", "rare_tokens", "seed"},
                       "data");
            read(s, "unique_pairs", t.data.unique_pairs);
            read(s, "memorized_prompts", t.data.memorized_prompts);
            read(s, "duplication", t.data.duplication);
            read(s, "rare_per_prompt", t.data.rare_per_prompt);
            read(s, "rare_tokens", t.vocab.rare_tokens);
            read(s, "seed", t.data.seed);
        }
        if (j.contains("model")) {
            // A full architecture descriptor replaces the profile's.
            t.model = config_from_json(j.at("model"));
            t.vocab.size = t.model.vocab;
            t.vocab.pad = t.model.pad_token;
            t.data.image_channels = t.model.image_channels;
            t.data.image_size = t.model.image_size;
        }
        if (j.contains("seeds")) c.seeds = seed_registry_from_json(j.at("seeds"));
        if (j.contains("threshold")) {
            const json& s = j.at("threshold");
            check_keys(s, {"sigma_multiplier", "prompts", "prompt_seed"}, "threshold");
            read(s, "sigma_multiplier", c.sigma_multiplier);
            read(s, "prompts", c.calibration_prompts);
            read(s, "prompt_seed", c.calibration_seed);
        }
        if (j.contains("localizer")) {
            const json& s = j.at("localizer");
            check_keys(s, {"theta_start", "theta_step", "theta_min"}, "localizer");
            read(s, "theta_start", c.localizer.theta_start);
            read(s, "theta_step", c.localizer.theta_step);
            read(s, "theta_min", c.localizer.theta_min);
        }
        if (j.contains("mitigation")) {
            const json& s = j.at("mitigation");
            check_keys(s, {"scale"}, "mitigation");
            read(s, "scale", c.mitigation_scale);
        }
        if (j.contains("evaluation")) {
            const json& s = j.at("evaluation");
            check_keys(s, {"prompts", "prompt_seed", "sampling_steps", "random_trials"}, "evaluation");
            read(s, "prompts", c.evaluation_prompts);
            read(s, "prompt_seed", c.evaluation_seed);
            read(s, "sampling_steps", c.sampling_steps);
            read(s, "random_trials", c.random_trials);
        }
        read(j, "out", c.out);
        c.localizer.seeds = c.seeds.localization;
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw DomainError(std::string("config: ") + e.what());
    } catch (const FormatError& e) {
        throw DomainError(std::string("config: ") + e.what());
    }
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open config file '" + path.string() + "'");
    json j;
    try {
        j = json::parse(f, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
        throw DomainError("config '" + path.string() + "': " + e.what());
    }
    return run_config_from_json(j);
}

std::string config_hash(const RunConfig& config) {
    const std::string s = to_json(config).dump();
    return hex64(fnv1a(s.data(), s.size()));
}

json to_json(const NeuronId& id) { return json::array({id.layer, id.index}); }

json to_json(const NeuronSet& set) {
    json a = json::array();
    for (const auto& n : set) a.push_back(to_json(n));
    return a;
}

NeuronSet neuron_set_from_json(const json& j) {
    NeuronSet s;
    for (const auto& e : j) s.insert({e.at(0).get<int>(), e.at(1).get<int>()});
    return s;
}

json to_json(const MemThreshold& t) {
    return {{"tau_mem", t.tau_mem},
            {"mean", t.mean},
            {"std", t.std},
            {"sigma_multiplier", t.sigma_multiplier},
            {"holdout_size", t.holdout_size}};
}

MemThreshold threshold_from_json(const json& j) {
    MemThreshold t;
    t.tau_mem = j.at("tau_mem").get<double>();
    t.mean = j.at("mean").get<double>();
    t.std = j.at("std").get<double>();
    t.sigma_multiplier = j.at("sigma_multiplier").get<double>();
    t.holdout_size = j.at("holdout_size").get<int>();
    return t;
}

json to_json(const ActivationStats& s) {
    // One array per layer, indexed by neuron.
    json mean = json::array(), sd = json::array();
    for (const auto& [id, m] : s.mean) {
        while (static_cast<int>(mean.size()) < id.layer) {
            mean.push_back(json::array());
            sd.push_back(json::array());
        }
        mean[id.layer - 1].push_back(m);
        sd[id.layer - 1].push_back(s.std.at(id));
    }
    return {{"holdout_size", s.holdout_size}, {"mean", mean}, {"std", sd}};
}

ActivationStats activation_stats_from_json(const json& j) {
    ActivationStats s;
    s.holdout_size = j.at("holdout_size").get<int>();
    const auto& mean = j.at("mean");
    const auto& sd = j.at("std");
    if (mean.size() != sd.size()) throw FormatError("activation stats: layer count mismatch");
    for (std::size_t l = 0; l < mean.size(); ++l) {
        if (mean[l].size() != sd[l].size()) throw FormatError("activation stats: width mismatch");
        for (std::size_t i = 0; i < mean[l].size(); ++i) {
            const NeuronId id{static_cast<int>(l) + 1, static_cast<int>(i)};
            s.mean[id] = mean[l][i].get<double>();
            s.std[id] = sd[l][i].get<double>();
        }
    }
    return s;
}

json to_json(const SelectionResult& r) {
    json rounds = json::array();
    for (const auto& x : r.rounds)
        rounds.push_back({{"theta_act", x.theta_act}, {"k", x.k}, {"candidates", x.candidates}, {"score", x.score}});
    return {{"s_initial", to_json(r.s_initial)},
            {"s_final", to_json(r.s_final)},
            {"tau_mem_ref", r.tau_mem_ref},
            {"tau_filter", r.tau_filter},
            {"theta_act_final", r.theta_act_final},
            {"k_final", r.k_final},
            {"rounds", rounds},
            {"refinement_scores", r.refinement_scores}};
}

json to_json(const OracleCertificate& c) {
    json sets = json::array();
    for (const auto& s : c.minimal_sets) sets.push_back(to_json(s));
    return {{"prompt_id", c.prompt_id},         {"minimal_sets", sets},
            {"max_cardinality", c.max_cardinality}, {"universe", c.universe},
            {"tau_mem", c.tau_mem},             {"evaluations", c.evaluations}};
}

OracleCertificate certificate_from_json(const json& j) {
    try {
        OracleCertificate c;
        c.prompt_id = j.at("prompt_id").get<std::string>();
        for (const auto& s : j.at("minimal_sets")) c.minimal_sets.push_back(neuron_set_from_json(s));
        c.max_cardinality = j.at("max_cardinality").get<int>();
        c.universe = j.at("universe").get<int>();
        c.tau_mem = j.at("tau_mem").get<double>();
        c.evaluations = j.at("evaluations").get<long>();
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("certificate: ") + e.what());
    }
}

}  // namespace nemo
