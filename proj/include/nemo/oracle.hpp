#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nemo/localizer.hpp"
#include "nemo/mem_score.hpp"
#include "nemo/model.hpp"

namespace nemo {

// Size bounds of the exhaustive search.
inline constexpr int kOracleMaxUniverse = 64;
inline constexpr int kOracleMaxCardinality = 3;

struct OracleCertificate {
    std::string prompt_id;
    // All minimum-cardinality sets whose deactivation drops the score below
    // tau_mem, in lexicographic order. {{}} when the prompt is not memorized,
    // empty when nothing up to max_cardinality suffices.
    std::vector<NeuronSet> minimal_sets;
    int max_cardinality = 0;
    int universe = 0;
    double tau_mem = 0.0;
    long evaluations = 0;

    bool found() const { return !minimal_sets.empty(); }
    int minimum_cardinality() const;  // -1 when nothing was found
    bool operator==(const OracleCertificate&) const = default;
};

// Enumerates subsets of the value neurons by cardinality 1..max_card in
// lexicographic order and stops at the first cardinality with a hit. Throws
// BudgetError beyond kOracleMaxUniverse neurons or kOracleMaxCardinality.
OracleCertificate brute_force_minimal_sets(const PromptEmbedding& prompt, const DenoiserModel& model,
                                           const MemThreshold& tau, int max_card,
                                           const std::vector<std::uint64_t>& seeds = SeedRegistry::defaults().localization,
                                           const std::string& prompt_id = "");

struct Sufficiency {
    bool sufficient = false;  // decided on the localization seeds
    double localization_score = 0.0;
    double fresh_score = 0.0;
};

Sufficiency verify_sufficiency(const NeuronSet& set, const PromptEmbedding& prompt, const DenoiserModel& model,
                               double tau, const SeedRegistry& seeds = SeedRegistry::defaults());

// Tiny model wired so that one value neuron is the only path from a planted
// token to the output, with a strong prompt-constant effect.
struct PlantedFixture {
    DenoiserModel model;
    PromptEmbedding planted;
    NeuronId neuron;
    std::vector<PromptEmbedding> holdout;  // prompts without the planted token
};

PlantedFixture make_planted_fixture(std::uint64_t seed = 11);

}  // namespace nemo
