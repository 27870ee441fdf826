// Acceptance suite. Prints one PASS/FAIL line per criterion on stdout and
// progress on stderr. Trained models are cached next to the build so reruns
// skip training.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "nemo/config.hpp"
#include "nemo/errors.hpp"
#include "nemo/localizer.hpp"
#include "nemo/metrics.hpp"
#include "nemo/model_io.hpp"
#include "nemo/oracle.hpp"
#include "nemo/parallel.hpp"
#include "nemo/pipeline.hpp"
#include "nemo/rng.hpp"
#include "nemo/train.hpp"
#include "test_helpers.hpp"

using namespace nemo;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int number, const std::string& name, const Outcome& o) {
    std::printf("%s %2d %-28s %s\n", o.pass ? "PASS" : "FAIL", number, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
}

// Runs one criterion; an exception counts as a failure.
void criterion(int number, const std::string& name, const std::function<Outcome()>& body) {
    std::fprintf(stderr, "-- %d %s\n", number, name.c_str());
    try {
        report(number, name, body());
    } catch (const std::exception& e) {
        report(number, name, {false, std::string("exception: ") + e.what()});
    }
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

DenoiserModel cached_model(const RunConfig& c, const fs::path& cache) {
    fs::create_directories(cache);
    const fs::path file = cache / (c.profile + "-" + config_hash(c) + ".nemo");
    if (fs::exists(file)) {
        std::fprintf(stderr, "loading %s\n", file.string().c_str());
        return load_model(file);
    }
    std::fprintf(stderr, "training %s profile (%d steps)\n", c.profile.c_str(), c.train.steps);
    const auto start = Clock::now();
    const TrainResult r = train_model(c.train, [](const TrainLogEntry& e) {
        if (e.step % 500 == 0) std::fprintf(stderr, "  step %d loss %.4f\n", e.step, e.loss);
    });
    std::fprintf(stderr, "  final loss %.4f in %.0f s\n", r.final_loss, seconds_since(start));
    if (!r.converged) throw NonConvergenceError(c.profile + " model did not converge", r.final_loss);
    save_model(r.model, file);
    return r.model;
}

struct Suite {
    RunConfig config;
    DenoiserModel model;
    Dataset dataset;
    Calibration calibration;
    std::vector<PromptEmbedding> memorized;
    std::vector<PromptEmbedding> holdout;  // fresh, disjoint from calibration
    std::vector<SelectionResult> selections;

    Suite(RunConfig c, const fs::path& cache)
        : config(std::move(c)),
          model(cached_model(config, cache)),
          dataset(make_dataset(config.train.data, config.train.vocab)),
          calibration(calibrate(config, model)) {
        for (int i = 0; i < dataset.memorized_count; ++i) memorized.push_back(model.embed(dataset.pairs[i].prompt.tokens));
        holdout = embed_all(model, evaluation_prompts(config));
        std::fprintf(stderr, "%s: tau_mem %.4f (mean %.4f std %.4f)\n", config.profile.c_str(),
                     calibration.tau.tau_mem, calibration.tau.mean, calibration.tau.std);
    }

    const SelectionResult& selection(std::size_t i) {
        if (selections.empty())
            for (const auto& y : memorized) {
                selections.push_back(localize(y, model, calibration.stats, calibration.tau, config.localizer));
                const auto& r = selections.back();
                std::fprintf(stderr, "  mem-%zu |s_initial| %zu |s_final| %zu theta %.2f k %d\n", selections.size() - 1,
                             r.s_initial.size(), r.s_final.size(), r.theta_act_final, r.k_final);
            }
        return selections.at(i);
    }
};

// Same formula as the library, written as plain loops over windows.
Outcome ssim_oracle() {
    GaussianSource rng(2024);
    std::vector<std::pair<LatentImage, LatentImage>> pairs;
    for (int i = 0; i < 100; ++i) {
        LatentImage a = testing::uniform_image(3, 16, rng);
        LatentImage b = testing::uniform_image(3, 16, rng);
        pairs.emplace_back(std::move(a), std::move(b));
    }
    const auto start = Clock::now();
    std::vector<double> fast;
    for (const auto& [a, b] : pairs) fast.push_back(ssim(a, b));
    const double elapsed = seconds_since(start);
    double worst = 0.0;
    bool identity = true;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        worst = std::max(worst, std::abs(fast[i] - testing::reference_ssim(pairs[i].first, pairs[i].second)));
        identity &= ssim(pairs[i].first, pairs[i].first) == 1.0;
    }
    return {worst <= 1e-6 && identity && elapsed < 1.0,
            "max |err| " + fmt("%.2e", worst) + (identity ? ", ssim(a,a)=1" : ", ssim(a,a)!=1") + ", " +
                fmt("%.3f s", elapsed)};
}

Outcome detection(Suite& s) {
    const auto start = Clock::now();
    const auto& seeds = s.config.seeds.localization;
    std::vector<double> pos, neg;
    for (const auto& y : s.memorized) pos.push_back(detect_memorized(y, s.model, s.calibration.tau, seeds).score);
    for (const auto& y : s.holdout) neg.push_back(detect_memorized(y, s.model, s.calibration.tau, seeds).score);
    const double a = auroc(pos, neg);
    const double elapsed = seconds_since(start);
    return {a >= 0.9 && pos.size() >= 4 && neg.size() >= 20 && elapsed < 120.0,
            fmt("AUROC %.3f", a) + " (" + std::to_string(pos.size()) + " duplicated vs " + std::to_string(neg.size()) +
                " holdout), min dup " + fmt("%.3f", *std::min_element(pos.begin(), pos.end())) + ", max holdout " +
                fmt("%.3f", *std::max_element(neg.begin(), neg.end())) + ", " + fmt("%.0f s", elapsed)};
}

Outcome terminates_and_mitigates(Suite& s) {
    bool exit_ok = true;
    int fresh_ok = 0;
    std::ostringstream d;
    for (std::size_t i = 0; i < s.memorized.size(); ++i) {
        const SelectionResult& r = s.selection(i);
        const double again =
            ScoreProbe(s.model, s.memorized[i], s.config.seeds.localization).score(r.s_final, r.tau_filter);
        const double fresh = ScoreProbe(s.model, s.memorized[i], s.config.seeds.evaluation).score(r.s_final, r.tau_filter);
        exit_ok &= again < r.tau_mem_ref + 1e-9;
        fresh_ok += fresh < r.tau_mem_ref;
        d << " mem-" << i << " " << fmt("%.3f", again) << "/" << fmt("%.3f", fresh) << " vs " << fmt("%.3f", r.tau_mem_ref);
    }
    const double frac = static_cast<double>(fresh_ok) / s.memorized.size();
    return {exit_ok && frac >= 0.8,
            std::string("exit condition ") + (exit_ok ? "holds" : "violated") + ", fresh seeds below in " +
                std::to_string(fresh_ok) + "/" + std::to_string(s.memorized.size()) + ";" + d.str()};
}

Outcome refinement_shrinks(Suite& s) {
    bool subset = true;
    double initial = 0.0, final = 0.0;
    std::ostringstream d;
    for (std::size_t i = 0; i < s.memorized.size(); ++i) {
        const SelectionResult& r = s.selection(i);
        subset &= std::includes(r.s_initial.begin(), r.s_initial.end(), r.s_final.begin(), r.s_final.end());
        initial += r.s_initial.size();
        final += r.s_final.size();
        d << " " << r.s_final.size() << "/" << r.s_initial.size();
    }
    initial /= s.memorized.size();
    final /= s.memorized.size();
    return {subset && final <= 0.5 * initial,
            "mean |s_final| " + fmt("%.2f", final) + " vs mean |s_initial| " + fmt("%.2f", initial) + ";" + d.str()};
}

Outcome random_baseline_fails(Suite& s) {
    const double tau = s.calibration.tau.tau_mem;
    bool all = true;
    std::ostringstream d;
    for (std::size_t i = 0; i < s.memorized.size(); ++i) {
        const SelectionResult& r = s.selection(i);
        const ScoreProbe probe(s.model, s.memorized[i], s.config.seeds.localization);
        int above = 0;
        for (int t = 0; t < s.config.random_trials; ++t) {
            const NeuronSet rnd = random_baseline(r.s_final, s.model, s.config.seeds.baseline_base + t);
            above += probe.score(rnd, tau) >= tau;
        }
        all &= above >= 0.8 * s.config.random_trials;
        d << " mem-" << i << " " << above << "/" << s.config.random_trials;
    }
    return {all, "trials above tau_mem:" + d.str()};
}

MetricConfig metric_config(const RunConfig& c) {
    MetricConfig m;
    m.seeds = c.seeds.evaluation;
    m.sampling_steps = c.sampling_steps;
    return m;
}

Outcome mitigation_ordering(Suite& s) {
    const MetricConfig mc = metric_config(s.config);
    bool all = true;
    std::ostringstream d;
    for (std::size_t i = 0; i < s.memorized.size(); ++i) {
        const NeuronMask mask = NeuronMask::deactivate(s.selection(i).s_final);
        const auto unmasked = generate(s.memorized[i], s.model, {}, mc);
        const auto masked = generate(s.memorized[i], s.model, mask, mc);
        const double gen = sscd_gen_from(masked, unmasked);
        const double div_u = diversity_from(unmasked), div_m = diversity_from(masked);
        all &= gen <= 0.5 && div_m < div_u - 0.2;
        d << " mem-" << i << " sscd_gen " << fmt("%.3f", gen) << " div " << fmt("%.3f", div_u) << "->"
          << fmt("%.3f", div_m);
    }
    return {all, d.str().substr(1)};
}

Outcome quality_preserved(Suite& s) {
    NeuronSet all;
    for (std::size_t i = 0; i < s.memorized.size(); ++i) all.insert(s.selection(i).s_final.begin(), s.selection(i).s_final.end());
    const double q = quality_delta(s.model, NeuronMask::deactivate(all), s.holdout);
    return {q <= 1.05, "quality_delta " + fmt("%.4f", q) + " with " + std::to_string(all.size()) + " neurons masked"};
}

Outcome holdouts_empty(Suite& s) {
    int empty = 0;
    for (const auto& y : s.holdout)
        empty += localize(y, s.model, s.calibration.stats, s.calibration.tau, s.config.localizer).s_final.empty();
    return {empty >= 0.8 * s.holdout.size(),
            std::to_string(empty) + "/" + std::to_string(s.holdout.size()) + " fresh holdout prompts give empty s_final"};
}

Outcome oracle_cross_validation(const fs::path& cache) {
    const auto start = Clock::now();
    std::ostringstream d;
    bool ok = true;

    const PlantedFixture f = make_planted_fixture();
    const auto seeds = SeedRegistry::defaults().localization;
    const MemThreshold tau = calibrate_threshold(f.model, f.holdout, seeds);
    const OracleCertificate cert = brute_force_minimal_sets(f.planted, f.model, tau, 2, seeds, "planted");
    const SelectionResult planted =
        localize(f.planted, f.model, compute_activation_stats(f.model, f.holdout), tau);
    const bool singleton = cert.minimal_sets.size() == 1 && cert.minimal_sets[0] == NeuronSet{f.neuron};
    ok &= singleton && planted.s_final == NeuronSet{f.neuron};
    d << "planted: oracle " << (singleton ? "unique singleton" : "unexpected") << ", localize |s_final| "
      << planted.s_final.size() << (planted.s_final == NeuronSet{f.neuron} ? " (match)" : " (mismatch)") << "; tiny:";

    Suite tiny(RunConfig::for_profile("tiny"), cache);
    for (std::size_t i = 0; i < tiny.memorized.size(); ++i) {
        const SelectionResult& r = tiny.selection(i);
        const OracleCertificate c = brute_force_minimal_sets(tiny.memorized[i], tiny.model, tiny.calibration.tau,
                                                             kOracleMaxCardinality, tiny.config.seeds.localization);
        const int minimum = c.minimum_cardinality();
        const bool bounded = minimum >= 0 && static_cast<int>(r.s_final.size()) <= 3 * minimum;
        ok &= bounded;
        d << " mem-" << i << " |s_final| " << r.s_final.size() << " oracle min " << minimum;
    }
    const double elapsed = seconds_since(start);
    ok &= elapsed < 600.0;
    return {ok, d.str() + ", " + fmt("%.0f s", elapsed)};
}

Outcome scaling_sweep(Suite& s) {
    const MetricConfig mc = metric_config(s.config);
    const std::vector<double> factors{0.75, 0.5, 0.25, 0.0, -0.25, -0.5, -1.0};
    std::vector<double> mean(factors.size(), 0.0);
    for (std::size_t i = 0; i < s.memorized.size(); ++i) {
        const auto unmasked = generate(s.memorized[i], s.model, {}, mc);
        for (std::size_t f = 0; f < factors.size(); ++f)
            mean[f] += sscd_gen_from(generate(s.memorized[i], s.model, NeuronMask::scaled(s.selection(i).s_final, factors[f]), mc),
                                     unmasked) /
                       s.memorized.size();
    }
    bool ok = true;
    for (std::size_t f = 1; f < 4; ++f) ok &= mean[f] <= mean[f - 1];
    for (std::size_t f = 4; f < factors.size(); ++f) ok &= std::abs(mean[f] - mean[3]) <= 0.1;
    std::ostringstream d;
    d << "mean sscd_gen by factor:";
    for (std::size_t f = 0; f < factors.size(); ++f) d << " " << factors[f] << "=" << fmt("%.3f", mean[f]);
    return {ok, d.str()};
}

Outcome guidance_cut(const DenoiserModel& m) {
    GaussianSource rng(77);
    const auto& c = m.config;
    const LatentImage x = gaussian_image(c.image_channels, c.image_size, c.image_size, rng);
    const NeuronMask all = NeuronMask::deactivate(m.all_neurons());
    const PromptEmbedding a = m.embed(std::vector<int>{3, 9, 27});
    const PromptEmbedding b = m.embed(std::vector<int>{c.vocab - 1, 5});
    bool equal = true;
    for (int t : {0, 250, c.diffusion_steps - 1}) equal &= predict_noise(m, x, t, a, all) == predict_noise(m, x, t, b, all);
    const bool differs = !(predict_noise(m, x, 250, a) == predict_noise(m, x, 250, b));
    return {equal && differs, std::string(equal ? "bit-equal" : "differ") + " with every value neuron masked, " +
                                  (differs ? "distinct" : "identical") + " without mask"};
}

Outcome gradient_check() {
    const DenoiserModel base = testing::randomized_model(testing::miniature_config(), 5);
    const auto& cfg = base.config;
    GaussianSource rng(11);
    TrainingExample ex;
    ex.x0 = gaussian_image(cfg.image_channels, cfg.image_size, cfg.image_size, rng);
    ex.noise = gaussian_image(cfg.image_channels, cfg.image_size, cfg.image_size, rng);
    ex.timestep = 6;
    ex.tokens = {1, 4};
    Weights grad = base.weights.zeros_like();
    loss_and_gradient(base, ex, grad);

    DenoiserModel probe = base;
    std::vector<Matrix*> params;
    probe.weights.visit([&](const std::string&, Matrix& m) { params.push_back(&m); });
    std::vector<const Matrix*> grads;
    grad.visit([&](const std::string&, const Matrix& m) { grads.push_back(&m); });
    const double h = 1e-3;
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix& p = *params[k];
        Matrix fd(p.rows(), p.cols());
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double keep = p.data()[i];
            p.data()[i] = keep + h;
            const double up = example_loss(probe, ex);
            p.data()[i] = keep - h;
            const double down = example_loss(probe, ex);
            p.data()[i] = keep;
            fd.data()[i] = (up - down) / (2 * h);
        }
        worst = std::max(worst, (fd - *grads[k]).norm() / std::max({fd.norm(), grads[k]->norm(), 1e-8}));
    }
    return {worst < 1e-3, "worst relative error " + fmt("%.2e", worst) + " over " + std::to_string(params.size()) +
                              " parameter tensors"};
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    const fs::path cache = argc > 1 ? fs::path(argv[1]) : fs::path(NEMO_ACCEPTANCE_CACHE);
    const auto start = Clock::now();

    criterion(1, "ssim-oracle", ssim_oracle);

    std::unique_ptr<Suite> toy;
    try {
        toy = std::make_unique<Suite>(RunConfig::for_profile("toy"), cache);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "toy model unavailable: %s\n", e.what());
    }
    auto on_toy = [&](int n, const std::string& name, std::function<Outcome(Suite&)> body) {
        criterion(n, name, [&]() -> Outcome {
            if (!toy) return {false, "toy model unavailable"};
            return body(*toy);
        });
    };
    on_toy(2, "detection-separation", detection);
    on_toy(3, "localization-mitigates", terminates_and_mitigates);
    on_toy(4, "refinement-shrinks", refinement_shrinks);
    on_toy(5, "random-baseline-fails", random_baseline_fails);
    on_toy(6, "mitigation-ordering", mitigation_ordering);
    on_toy(7, "quality-preserved", quality_preserved);
    on_toy(8, "holdouts-empty", holdouts_empty);
    criterion(9, "oracle-cross-validation", [&] { return oracle_cross_validation(cache); });
    on_toy(10, "scaling-sweep", scaling_sweep);
    on_toy(11, "guidance-cut", [](Suite& s) { return guidance_cut(s.model); });
    criterion(12, "gradient-check", gradient_check);

    std::printf("%d of 12 criteria failed, %.0f s\n", failures, seconds_since(start));
    return failures == 0 ? 0 : 1;
}
