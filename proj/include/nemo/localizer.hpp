#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "nemo/mem_score.hpp"
#include "nemo/model.hpp"

namespace nemo {

// Per-neuron activation baseline over a holdout prompt set.
struct ActivationStats {
    std::map<NeuronId, double> mean;
    std::map<NeuronId, double> std;  // population standard deviation
    int holdout_size = 0;
};

ActivationStats compute_activation_stats(const DenoiserModel& model, const std::vector<PromptEmbedding>& holdout);

// Same statistics from already recorded activation maps.
ActivationStats activation_stats_from(const std::vector<ActivationMap>& maps);

// z = (a - mean) / std. A zero std yields 0 when a equals the mean and +inf
// otherwise. Throws DomainError when the stats lack a neuron of `act`.
std::map<NeuronId, double> z_scores(const ActivationMap& act, const ActivationStats& stats);

// Neurons with |z| > theta_act, plus the k largest activations of every layer
// (ties broken by lower index).
NeuronSet ood_neurons(const ActivationMap& act, double theta_act, int k, const ActivationStats& stats);
NeuronSet ood_neurons(const PromptEmbedding& prompt, double theta_act, int k, const ActivationStats& stats,
                      const DenoiserModel& model);

struct LocalizerConfig {
    double theta_start = 5.0;
    double theta_step = 0.25;
    double theta_min = 1.0;
    std::vector<std::uint64_t> seeds = SeedRegistry::defaults().localization;
};

struct SelectionRound {
    double theta_act = 0.0;
    int k = 0;
    int candidates = 0;
    double score = 0.0;

    bool operator==(const SelectionRound&) const = default;
};

struct SelectionResult {
    NeuronSet s_initial;
    NeuronSet s_final;
    double tau_mem_ref = 0.0;
    double tau_filter = 0.0;  // seed-filter threshold used throughout
    double theta_act_final = 0.0;
    int k_final = 0;
    std::vector<SelectionRound> rounds;
    // Scores of the refinement checks in evaluation order.
    std::vector<double> refinement_scores;

    bool operator==(const SelectionResult&) const = default;
};

// Memorization score of one prompt under candidate deactivations. The
// unmasked noise differences are computed once and reused.
class ScoreProbe {
public:
    ScoreProbe(const DenoiserModel& model, const PromptEmbedding& prompt, std::vector<std::uint64_t> seeds);

    // Cross score between the unmasked and masked differences, each filtered at
    // `tau`. An empty side after filtering scores 0. Same-seed pairs count.
    double score(const NeuronMask& mask, double tau) const;
    double score(const NeuronSet& deactivated, double tau) const { return score(NeuronMask::deactivate(deactivated), tau); }

    // Unfiltered self score of the unmasked differences.
    double unmasked_self_score() const;

    long evaluations() const { return evaluations_; }

private:
    const DenoiserModel& model_;
    PromptEmbedding prompt_;
    std::vector<std::uint64_t> seeds_;
    std::vector<NoiseDifference> unmasked_;
    mutable std::atomic<long> evaluations_{0};
};

// Lowers theta_act and raises k until deactivating the outliers drops the
// score below tau_mem. s_final is left empty.
SelectionResult initial_selection(const PromptEmbedding& prompt, const DenoiserModel& model,
                                  const ActivationStats& stats, const MemThreshold& tau,
                                  const LocalizerConfig& config = {});

// Drops whole layers, then single neurons, whose reactivation keeps the score
// below tau_mem_ref. Layers and neurons are visited in ascending order. Seed
// filtering uses `tau_filter` (the calibrated tau_mem).
NeuronSet refine(const NeuronSet& s_initial, const PromptEmbedding& prompt, const DenoiserModel& model,
                 double tau_mem_ref, double tau_filter, const LocalizerConfig& config = {},
                 std::vector<double>* scores = nullptr);

SelectionResult localize(const PromptEmbedding& prompt, const DenoiserModel& model, const ActivationStats& stats,
                         const MemThreshold& tau, const LocalizerConfig& config = {});

}  // namespace nemo
