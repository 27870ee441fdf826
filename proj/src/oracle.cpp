#include "nemo/oracle.hpp"

#include "nemo/data.hpp"
#include "nemo/parallel.hpp"
#include "nemo/train.hpp"

namespace nemo {

int OracleCertificate::minimum_cardinality() const {
    return minimal_sets.empty() ? -1 : static_cast<int>(minimal_sets.front().size());
}

OracleCertificate brute_force_minimal_sets(const PromptEmbedding& prompt, const DenoiserModel& model,
                                           const MemThreshold& tau, int max_card,
                                           const std::vector<std::uint64_t>& seeds, const std::string& prompt_id) {
    const NeuronSet all = model.all_neurons();
    const std::vector<NeuronId> universe(all.begin(), all.end());
    const int n = static_cast<int>(universe.size());
    if (n > kOracleMaxUniverse)
        throw BudgetError("oracle: " + std::to_string(n) + " value neurons exceed the bound of " +
                          std::to_string(kOracleMaxUniverse));
    if (max_card < 1 || max_card > kOracleMaxCardinality)
        throw BudgetError("oracle: cardinality bound must be in [1, " + std::to_string(kOracleMaxCardinality) + "]");

    OracleCertificate cert;
    cert.prompt_id = prompt_id;
    cert.max_cardinality = max_card;
    cert.universe = n;
    cert.tau_mem = tau.tau_mem;

    const ScoreProbe probe(model, prompt, seeds);
    ++cert.evaluations;
    if (probe.score(NeuronMask{}, tau.tau_mem) < tau.tau_mem) {
        cert.minimal_sets.push_back({});
        return cert;
    }

    for (int card = 1; card <= max_card; ++card) {
        // All index combinations of this size, lexicographic.
        std::vector<std::vector<int>> combos;
        std::vector<int> c(card);
        for (int i = 0; i < card; ++i) c[i] = i;
        while (true) {
            combos.push_back(c);
            int i = card - 1;
            while (i >= 0 && c[i] == n - card + i) --i;
            if (i < 0) break;
            ++c[i];
            for (int j = i + 1; j < card; ++j) c[j] = c[j - 1] + 1;
        }
        std::vector<char> hit(combos.size(), 0);
        parallel_for(static_cast<int>(combos.size()), [&](int k) {
            NeuronSet s;
            for (int idx : combos[k]) s.insert(universe[idx]);
            hit[k] = probe.score(s, tau.tau_mem) < tau.tau_mem;
        });
        cert.evaluations += static_cast<long>(combos.size());
        for (std::size_t k = 0; k < combos.size(); ++k)
            if (hit[k]) {
                NeuronSet s;
                for (int idx : combos[k]) s.insert(universe[idx]);
                cert.minimal_sets.push_back(std::move(s));
            }
        if (!cert.minimal_sets.empty()) break;
    }
    return cert;
}

Sufficiency verify_sufficiency(const NeuronSet& set, const PromptEmbedding& prompt, const DenoiserModel& model,
                               double tau, const SeedRegistry& seeds) {
    Sufficiency s;
    s.localization_score = ScoreProbe(model, prompt, seeds.localization).score(set, tau);
    s.fresh_score = ScoreProbe(model, prompt, seeds.evaluation).score(set, tau);
    s.sufficient = s.localization_score < tau;
    return s;
}

PlantedFixture make_planted_fixture(std::uint64_t seed) {
    constexpr double kStrength = 150.0;
    ModelConfig cfg = tiny_profile();
    PlantedFixture f{init_model(cfg, seed), {}, {1, 0}, {}};
    Weights& w = f.model.weights;
    const int planted_token = cfg.vocab - 1;
    const int channel = cfg.text_width - 1;  // embedding dimension reserved for the planted token

    w.token_embedding.col(channel).setZero();
    w.token_embedding(planted_token, channel) = 1.0;
    for (auto& b : w.blocks) {
        b.attn.w_v.row(channel).setZero();
        b.attn.w_k.row(channel).setZero();
    }
    // Uniform attention in the first layer keeps the planted contribution
    // independent of x_t.
    auto& first = w.blocks[0].attn;
    first.w_q.setZero();
    first.w_v.col(f.neuron.index).setZero();
    first.w_v(channel, f.neuron.index) = kStrength;

    Vocabulary vocab;
    vocab.size = cfg.vocab;
    vocab.rare_tokens = 1;
    for (const auto& p : holdout_prompts(vocab, 30, seed + 1000)) f.holdout.push_back(f.model.embed(p.tokens));
    f.planted = f.model.embed(std::vector<int>{planted_token, 3, 9, 14, 20});
    return f;
}

}  // namespace nemo
