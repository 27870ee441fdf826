#include "nemo/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace nemo {

ActivationStats activation_stats_from(const std::vector<ActivationMap>& maps) {
    ActivationStats s;
    s.holdout_size = static_cast<int>(maps.size());
    if (maps.empty()) return s;
    const int layers = maps.front().layer_count();
    for (int l = 0; l < layers; ++l) {
        const auto width = maps.front().layers[l].size();
        for (Eigen::Index i = 0; i < width; ++i) {
            double sum = 0.0;
            for (const auto& m : maps) {
                if (m.layer_count() != layers || m.layers[l].size() != width)
                    throw ShapeError("activation maps disagree in shape");
                sum += m.layers[l](i);
            }
            const double mean = sum / maps.size();
            double sq = 0.0;
            for (const auto& m : maps) sq += (m.layers[l](i) - mean) * (m.layers[l](i) - mean);
            const NeuronId id{l + 1, static_cast<int>(i)};
            s.mean[id] = mean;
            s.std[id] = std::sqrt(sq / maps.size());
        }
    }
    return s;
}

ActivationStats compute_activation_stats(const DenoiserModel& model, const std::vector<PromptEmbedding>& holdout) {
    if (static_cast<int>(holdout.size()) < kMinHoldoutPrompts)
        throw DomainError("compute_activation_stats: need at least " + std::to_string(kMinHoldoutPrompts) +
                          " holdout prompts, got " + std::to_string(holdout.size()));
    std::vector<ActivationMap> maps;
    maps.reserve(holdout.size());
    for (const auto& p : holdout) maps.push_back(record_activations(model, p));
    return activation_stats_from(maps);
}

std::map<NeuronId, double> z_scores(const ActivationMap& act, const ActivationStats& stats) {
    std::map<NeuronId, double> z;
    for (int l = 0; l < act.layer_count(); ++l)
        for (Eigen::Index i = 0; i < act.layers[l].size(); ++i) {
            const NeuronId id{l + 1, static_cast<int>(i)};
            const auto m = stats.mean.find(id);
            const auto s = stats.std.find(id);
            if (m == stats.mean.end() || s == stats.std.end())
                throw DomainError("z_scores: no statistics for neuron (" + std::to_string(id.layer) + ", " +
                                  std::to_string(id.index) + ")");
            const double a = act.layers[l](i);
            if (s->second > 0.0)
                z[id] = (a - m->second) / s->second;
            else
                z[id] = a == m->second ? 0.0 : std::numeric_limits<double>::infinity();
        }
    return z;
}

NeuronSet ood_neurons(const ActivationMap& act, double theta_act, int k, const ActivationStats& stats) {
    if (!(theta_act > 0.0)) throw DomainError("ood_neurons: theta_act must be positive");
    if (k < 0) throw DomainError("ood_neurons: k must be non-negative");
    NeuronSet out;
    for (const auto& [id, z] : z_scores(act, stats))
        if (std::abs(z) > theta_act) out.insert(id);
    for (int l = 0; l < act.layer_count(); ++l) {
        const Vector& a = act.layers[l];
        std::vector<int> order(a.size());
        std::iota(order.begin(), order.end(), 0);
        const int take = std::min<int>(k, static_cast<int>(order.size()));
        std::partial_sort(order.begin(), order.begin() + take, order.end(), [&](int x, int y) {
            const double ax = std::abs(a(x)), ay = std::abs(a(y));
            return ax != ay ? ax > ay : x < y;
        });
        for (int j = 0; j < take; ++j) out.insert({l + 1, order[j]});
    }
    return out;
}

NeuronSet ood_neurons(const PromptEmbedding& prompt, double theta_act, int k, const ActivationStats& stats,
                      const DenoiserModel& model) {
    return ood_neurons(record_activations(model, prompt), theta_act, k, stats);
}

ScoreProbe::ScoreProbe(const DenoiserModel& model, const PromptEmbedding& prompt, std::vector<std::uint64_t> seeds)
    : model_(model), prompt_(prompt), seeds_(std::move(seeds)) {
    if (seeds_.size() < 2) throw DomainError("ScoreProbe: need at least two seeds");
    unmasked_ = raw_noise_differences(prompt_, {}, model_, seeds_);
}

double ScoreProbe::score(const NeuronMask& mask, double tau) const {
    ++evaluations_;
    const auto a = filter_noise_differences(unmasked_, tau);
    if (a.empty()) return 0.0;
    const auto b = mask.empty() ? unmasked_ : raw_noise_differences(prompt_, mask, model_, seeds_);
    const auto bf = filter_noise_differences(b, tau);
    if (bf.empty()) return 0.0;
    return memorization_score(a, bf);
}

double ScoreProbe::unmasked_self_score() const { return self_memorization_score(unmasked_); }

namespace {

SelectionResult initial_selection(const ScoreProbe& probe, const PromptEmbedding& prompt, const DenoiserModel& model,
                                  const ActivationStats& stats, const MemThreshold& tau,
                                  const LocalizerConfig& config) {
    if (!(config.theta_min > 0.0)) throw DomainError("initial_selection: theta_min must be positive");
    if (!(config.theta_step > 0.0)) throw DomainError("initial_selection: theta_step must be positive");
    SelectionResult r;
    r.tau_mem_ref = tau.tau_mem;
    r.tau_filter = tau.tau_mem;
    r.theta_act_final = config.theta_start;

    // Nothing to localize when the unmasked differences already fall under the bar.
    if (probe.unmasked_self_score() < tau.tau_mem) {
        r.rounds.push_back({config.theta_start, 0, 0, probe.score(NeuronMask{}, tau.tau_mem)});
        return r;
    }

    const ActivationMap act = record_activations(model, prompt);
    for (int round = 0;; ++round) {
        const double theta = config.theta_start - round * config.theta_step;
        if (theta < config.theta_min) break;
        NeuronSet candidates = ood_neurons(act, theta, round, stats);
        const double score = probe.score(candidates, tau.tau_mem);
        r.rounds.push_back({theta, round, static_cast<int>(candidates.size()), score});
        r.s_initial = std::move(candidates);
        r.theta_act_final = theta;
        r.k_final = round;
        if (score < tau.tau_mem) return r;
    }
    // Out of thresholds: refinement may not exceed what was reached.
    if (!r.rounds.empty()) r.tau_mem_ref = r.rounds.back().score;
    return r;
}

NeuronSet refine(const ScoreProbe& probe, const NeuronSet& s_initial, double tau_ref, double tau_filter,
                 std::vector<double>* scores) {
    NeuronSet refined = s_initial;
    const auto check = [&](const NeuronSet& s) {
        const double v = probe.score(s, tau_filter);
        if (scores) scores->push_back(v);
        return v < tau_ref;
    };

    std::map<int, NeuronSet> by_layer;
    for (const auto& n : s_initial) by_layer[n.layer].insert(n);
    for (const auto& [layer, members] : by_layer) {
        NeuronSet without;
        std::set_difference(refined.begin(), refined.end(), members.begin(), members.end(),
                            std::inserter(without, without.end()));
        if (without.size() == refined.size()) continue;
        if (check(without)) refined = std::move(without);
    }

    const NeuronSet survivors = refined;
    for (const auto& n : survivors) {
        NeuronSet without = refined;
        without.erase(n);
        if (check(without)) refined = std::move(without);
    }
    return refined;
}

}  // namespace

SelectionResult initial_selection(const PromptEmbedding& prompt, const DenoiserModel& model,
                                  const ActivationStats& stats, const MemThreshold& tau,
                                  const LocalizerConfig& config) {
    const ScoreProbe probe(model, prompt, config.seeds);
    return initial_selection(probe, prompt, model, stats, tau, config);
}

NeuronSet refine(const NeuronSet& s_initial, const PromptEmbedding& prompt, const DenoiserModel& model,
                 double tau_mem_ref, double tau_filter, const LocalizerConfig& config, std::vector<double>* scores) {
    if (s_initial.empty()) return {};
    const ScoreProbe probe(model, prompt, config.seeds);
    return refine(probe, s_initial, tau_mem_ref, tau_filter, scores);
}

SelectionResult localize(const PromptEmbedding& prompt, const DenoiserModel& model, const ActivationStats& stats,
                         const MemThreshold& tau, const LocalizerConfig& config) {
    const ScoreProbe probe(model, prompt, config.seeds);
    SelectionResult r = initial_selection(probe, prompt, model, stats, tau, config);
    if (!r.s_initial.empty()) r.s_final = refine(probe, r.s_initial, r.tau_mem_ref, r.tau_filter, &r.refinement_scores);
    return r;
}

}  // namespace nemo
