#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nemo/errors.hpp"
#include "nemo/localizer.hpp"
#include "nemo/oracle.hpp"
#include "nemo/rng.hpp"
#include "test_helpers.hpp"

using namespace nemo;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ActivationMap map_of(std::vector<std::vector<double>> layers) {
    ActivationMap m;
    for (const auto& l : layers) m.layers.push_back(Eigen::Map<const Vector>(l.data(), l.size()));
    return m;
}

ActivationMap random_map(GaussianSource& rng, std::vector<int> widths) {
    ActivationMap m;
    for (int w : widths) {
        Vector v(w);
        for (int i = 0; i < w; ++i) v(i) = std::abs(rng.normal());
        m.layers.push_back(v);
    }
    return m;
}

// Direct recomputation of the localization score; an empty side scores 0.
double direct_score(const PromptEmbedding& y, const NeuronSet& off, const DenoiserModel& m, double tau) {
    const auto seeds = SeedRegistry::defaults().localization;
    const auto base = noise_differences(y, NeuronSet{}, m, tau, seeds);
    const auto masked = noise_differences(y, off, m, tau, seeds);
    return base.empty() || masked.empty() ? 0.0 : memorization_score(base, masked);
}

bool subset(const NeuronSet& a, const NeuronSet& b) { return std::includes(b.begin(), b.end(), a.begin(), a.end()); }

}  // namespace

TEST_CASE("activation statistics of three hand maps") {
    const auto stats = activation_stats_from({map_of({{1, 0}, {2}}), map_of({{2, 0}, {4}}), map_of({{6, 0}, {9}})});
    CHECK(stats.holdout_size == 3);
    CHECK(stats.mean.at({1, 0}) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(stats.std.at({1, 0}) == doctest::Approx(std::sqrt(14.0 / 3.0)).epsilon(1e-12));
    CHECK(stats.mean.at({1, 1}) == 0.0);
    CHECK(stats.std.at({1, 1}) == 0.0);
    CHECK(stats.mean.at({2, 0}) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(stats.std.at({2, 0}) == doctest::Approx(std::sqrt(26.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("activation statistics are permutation invariant and cover the registry") {
    const DenoiserModel m = testing::randomized_model(testing::miniature_config(), 41);
    Vocabulary v;
    v.size = m.config.vocab;
    v.rare_tokens = 1;
    v.min_length = 1;
    v.max_length = 3;
    std::vector<PromptEmbedding> holdout;
    for (const auto& p : holdout_prompts(v, 24, 3)) holdout.push_back(m.embed(p.tokens));
    const ActivationStats a = compute_activation_stats(m, holdout);
    std::reverse(holdout.begin(), holdout.end());
    const ActivationStats b = compute_activation_stats(m, holdout);
    CHECK(a.mean.size() == static_cast<std::size_t>(m.neuron_count()));
    for (const auto& id : m.all_neurons()) {
        CHECK(a.mean.at(id) == doctest::Approx(b.mean.at(id)).epsilon(1e-12));
        CHECK(a.std.at(id) == doctest::Approx(b.std.at(id)).epsilon(1e-12));
        CHECK(a.std.at(id) >= 0.0);
    }

    const ActivationStats flat = compute_activation_stats(m, std::vector<PromptEmbedding>(20, holdout[0]));
    for (const auto& [id, s] : flat.std) CHECK(s < 1e-12);
    CHECK_THROWS_AS(compute_activation_stats(m, std::vector<PromptEmbedding>(19, holdout[0])), DomainError);
}

TEST_CASE("z-scores") {
    const auto stats = activation_stats_from({map_of({{1, 5}, {2}}), map_of({{3, 5}, {4}})});
    // mean (2, 5 | 3), std (1, 0 | 1)
    SUBCASE("at the mean") {
        for (const auto& [id, z] : z_scores(map_of({{2, 5}, {3}}), stats)) CHECK(z == 0.0);
    }
    SUBCASE("two sigma") {
        const auto z = z_scores(map_of({{4, 5}, {3}}), stats);
        CHECK(z.at({1, 0}) == 2.0);
        CHECK(z.at({2, 0}) == 0.0);
    }
    SUBCASE("zero std gives an infinite sentinel off the mean") {
        const auto z = z_scores(map_of({{2, 5.5}, {3}}), stats);
        CHECK(z.at({1, 1}) == kInf);
    }
    SUBCASE("missing neuron") { CHECK_THROWS_AS(z_scores(map_of({{2, 5, 1}, {3}}), stats), DomainError); }
    SUBCASE("random stats against the formula") {
        GaussianSource rng(42);
        std::vector<ActivationMap> maps;
        for (int i = 0; i < 25; ++i) maps.push_back(random_map(rng, {7, 5}));
        const ActivationStats s = activation_stats_from(maps);
        const ActivationMap act = random_map(rng, {7, 5});
        for (const auto& [id, z] : z_scores(act, s)) CHECK(z == (act.at(id) - s.mean.at(id)) / s.std.at(id));
    }
}

TEST_CASE("ood neurons") {
    GaussianSource rng(43);
    std::vector<ActivationMap> maps;
    for (int i = 0; i < 30; ++i) maps.push_back(random_map(rng, {6, 9}));
    const ActivationStats stats = activation_stats_from(maps);

    SUBCASE("infinite threshold and k = 0 select nothing") {
        CHECK(ood_neurons(random_map(rng, {6, 9}), kInf, 0, stats).empty());
    }
    SUBCASE("infinite threshold and k = 1 select each layer's argmax") {
        const ActivationMap act = random_map(rng, {6, 9});
        const NeuronSet s = ood_neurons(act, kInf, 1, stats);
        REQUIRE(s.size() == 2);
        Eigen::Index i0, i1;
        act.layers[0].maxCoeff(&i0);
        act.layers[1].maxCoeff(&i1);
        CHECK(s == NeuronSet{{1, static_cast<int>(i0)}, {2, static_cast<int>(i1)}});
    }
    SUBCASE("constructed fixture with exactly two outliers") {
        ActivationStats hand;
        hand.holdout_size = 20;
        for (int l = 1; l <= 2; ++l)
            for (int i = 0; i < 9; ++i) {
                hand.mean[{l, i}] = 1.0;
                hand.std[{l, i}] = 0.5;
            }
        ActivationMap act = map_of({std::vector<double>(9, 1.2), std::vector<double>(9, 0.9)});
        act.layers[0](3) = 1.0 + 0.5 * 4.5;
        act.layers[1](7) = 1.0 - 0.5 * 4.1;  // negative deviation counts too
        act.layers[1](2) = 1.0 + 0.5 * 3.9;
        CHECK(ood_neurons(act, 4.0, 0, hand) == NeuronSet{{1, 3}, {2, 7}});
    }
    SUBCASE("ties in top-k go to the lower index") {
        ActivationMap act = map_of({std::vector<double>(6, 1.0), std::vector<double>(9, 2.0)});
        CHECK(ood_neurons(act, kInf, 2, stats) == NeuronSet{{1, 0}, {1, 1}, {2, 0}, {2, 1}});
    }
    SUBCASE("lowering theta or raising k never shrinks the set") {
        for (int trial = 0; trial < 20; ++trial) {
            const ActivationMap act = random_map(rng, {6, 9});
            NeuronSet prev;
            for (int round = 0; round < 12; ++round) {
                const NeuronSet s = ood_neurons(act, 4.0 - 0.25 * round, round, stats);
                CHECK(subset(prev, s));
                prev = s;
            }
        }
    }
    SUBCASE("bad arguments") {
        CHECK_THROWS_AS(ood_neurons(maps[0], 0.0, 0, stats), DomainError);
        CHECK_THROWS_AS(ood_neurons(maps[0], 1.0, -1, stats), DomainError);
    }
}

TEST_CASE("localization on the planted fixture") {
    const PlantedFixture f = make_planted_fixture();
    const auto seeds = SeedRegistry::defaults().localization;
    const MemThreshold tau = calibrate_threshold(f.model, f.holdout, seeds);
    const ActivationStats stats = compute_activation_stats(f.model, f.holdout);
    REQUIRE(detect_memorized(f.planted, f.model, tau, seeds).memorized);

    const SelectionResult r = localize(f.planted, f.model, stats, tau);
    CHECK(r.s_final == NeuronSet{f.neuron});
    CHECK(subset(r.s_final, r.s_initial));
    CHECK(r == localize(f.planted, f.model, stats, tau));

    SUBCASE("the loop exit condition holds on a fresh recomputation") {
        CHECK(direct_score(f.planted, r.s_final, f.model, tau.tau_mem) < r.tau_mem_ref + 1e-9);
    }
    SUBCASE("trace decreases theta by one step and raises k by one per round") {
        REQUIRE_FALSE(r.rounds.empty());
        for (std::size_t i = 0; i < r.rounds.size(); ++i) {
            CHECK(r.rounds[i].theta_act == doctest::Approx(5.0 - 0.25 * i).epsilon(1e-15));
            CHECK(r.rounds[i].k == static_cast<int>(i));
        }
        CHECK(r.rounds.back().score < tau.tau_mem);
        CHECK(r.tau_mem_ref == tau.tau_mem);
    }
    SUBCASE("unflagged holdout prompts get empty sets") {
        int quiet = 0;
        for (const auto& y : f.holdout) {
            const SelectionResult h = localize(y, f.model, stats, tau);
            CHECK(subset(h.s_final, h.s_initial));
            if (detect_memorized(y, f.model, tau, seeds).memorized) continue;
            ++quiet;
            CHECK(h.s_final.empty());
            CHECK(h.s_initial.empty());
        }
        CHECK(quiet > 0);
    }
}

TEST_CASE("initial selection returns nothing for a prompt below the threshold") {
    const PlantedFixture f = make_planted_fixture();
    const auto seeds = SeedRegistry::defaults().localization;
    MemThreshold tau = calibrate_threshold(f.model, f.holdout, seeds);
    tau.tau_mem = 1.01;  // nothing can reach it
    const ActivationStats stats = compute_activation_stats(f.model, f.holdout);
    const SelectionResult r = initial_selection(f.planted, f.model, stats, tau);
    CHECK(r.s_initial.empty());
    CHECK(r.theta_act_final == 5.0);
    CHECK(r.k_final == 0);
    REQUIRE(r.rounds.size() == 1);
    CHECK(localize(f.planted, f.model, stats, tau).s_final.empty());

    LocalizerConfig bad;
    bad.theta_min = 0.0;
    CHECK_THROWS_AS(initial_selection(f.planted, f.model, stats, tau, bad), DomainError);
}

TEST_CASE("initial selection stops at theta_min with the reached score as refinement bar") {
    const PlantedFixture f = make_planted_fixture();
    const auto seeds = SeedRegistry::defaults().localization;
    const MemThreshold tau = calibrate_threshold(f.model, f.holdout, seeds);
    const ActivationStats stats = compute_activation_stats(f.model, f.holdout);
    // No score can drop below -1, so every round fails.
    MemThreshold strict = tau;
    strict.tau_mem = -1.0;
    LocalizerConfig c;
    c.theta_min = 4.0;
    const SelectionResult r = initial_selection(f.planted, f.model, stats, strict, c);
    REQUIRE(r.rounds.size() == 5);  // theta 5, 4.75, 4.5, 4.25, 4
    CHECK(r.rounds.back().theta_act == 4.0);
    CHECK(r.tau_mem_ref == r.rounds.back().score);
    CHECK(r.theta_act_final == 4.0);
    CHECK(r.k_final == 4);
}

TEST_CASE("refinement removes only") {
    const PlantedFixture f = make_planted_fixture();
    const auto seeds = SeedRegistry::defaults().localization;
    const MemThreshold tau = calibrate_threshold(f.model, f.holdout, seeds);
    CHECK(refine({}, f.planted, f.model, tau.tau_mem, tau.tau_mem).empty());

    // A padded candidate set: the planted neuron plus unrelated ones.
    NeuronSet padded{f.neuron, {1, 5}, {1, 9}, {2, 2}, {2, 11}};
    std::vector<double> scores;
    const NeuronSet out = refine(padded, f.planted, f.model, tau.tau_mem, tau.tau_mem, {}, &scores);
    CHECK(out == NeuronSet{f.neuron});
    CHECK(subset(out, padded));
    CHECK_FALSE(scores.empty());

    // Every survivor is individually necessary.
    for (const auto& n : out) {
        NeuronSet without = out;
        without.erase(n);
        CHECK(direct_score(f.planted, without, f.model, tau.tau_mem) >= tau.tau_mem);
    }
}

TEST_CASE("score probe agrees with the direct computation") {
    const PlantedFixture f = make_planted_fixture();
    const auto seeds = SeedRegistry::defaults().localization;
    const MemThreshold tau = calibrate_threshold(f.model, f.holdout, seeds);
    const ScoreProbe probe(f.model, f.planted, seeds);
    for (const NeuronSet& s : {NeuronSet{}, NeuronSet{f.neuron}, NeuronSet{{1, 2}, {2, 3}}}) {
        CHECK(probe.score(s, tau.tau_mem) == direct_score(f.planted, s, f.model, tau.tau_mem));
    }
    CHECK(probe.unmasked_self_score() == detect_memorized(f.planted, f.model, tau, seeds).score);
    CHECK(probe.evaluations() == 3);
}
