// Command-line front end: train, calibrate, localize, mitigate, evaluate,
// oracle, report. Every verb writes into a fresh run directory.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "nemo/config.hpp"
#include "nemo/errors.hpp"
#include "nemo/localizer.hpp"
#include "nemo/metrics.hpp"
#include "nemo/model_io.hpp"
#include "nemo/oracle.hpp"
#include "nemo/parallel.hpp"
#include "nemo/pipeline.hpp"
#include "nemo/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nemo;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNonConvergence = 3 };

// Bad flags or config values.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config_path;
    std::string model_path;
    std::string threshold_path;
    std::vector<std::string> prompts;
    std::optional<double> scale;
    int jobs = 0;
    std::string seed_registry_path;
    std::string out;
    std::string selection_path;
    int max_card = kOracleMaxCardinality;
    bool planted = false;
    std::string run_dir;
};

json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open '" + path.string() + "'");
    try {
        return json::parse(f, nullptr, true, true);
    } catch (const json::exception& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write '" + path.string() + "'");
    f << j.dump(2) << '\n';
}

RunConfig load_config(const Options& o) {
    try {
        RunConfig c = o.config_path.empty() ? RunConfig::for_profile("toy") : load_run_config(o.config_path);
        if (!o.seed_registry_path.empty()) {
            c.seeds = seed_registry_from_json(read_json(o.seed_registry_path));
            c.localizer.seeds = c.seeds.localization;
        }
        if (o.scale) c.mitigation_scale = *o.scale;
        if (!o.out.empty()) c.out = o.out;
        c.validate();
        return c;
    } catch (const DomainError& e) {
        throw UsageError(e.what());
    } catch (const FormatError& e) {
        throw UsageError(e.what());
    }
}

// out/<UTC timestamp>-<config hash>, never reusing an existing directory.
fs::path make_run_dir(const RunConfig& c, const std::string& verb) {
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", std::gmtime(&now));
    const std::string base = std::string(stamp) + "-" + config_hash(c).substr(0, 8) + "-" + verb;
    fs::path dir = fs::path(c.out) / base;
    for (int i = 2; fs::exists(dir); ++i) dir = fs::path(c.out) / (base + "-" + std::to_string(i));
    fs::create_directories(dir);
    return dir;
}

json provenance(const RunConfig& c) {
    return {{"config", to_json(c)}, {"config_hash", config_hash(c)}, {"seeds", to_json(c.seeds)}};
}

DenoiserModel require_model(const Options& o) {
    if (o.model_path.empty()) throw UsageError("--model is required");
    return load_model(o.model_path);
}

Calibration require_threshold(const Options& o, const RunConfig& c, const DenoiserModel& model) {
    if (o.threshold_path.empty()) {
        std::cerr << "no --threshold given, calibrating on " << c.calibration_prompts << " holdout prompts\n";
        return calibrate(c, model);
    }
    return calibration_from_json(read_json(o.threshold_path).at("calibration"));
}

// The dataset is rebuilt from the config; it is deterministic.
Dataset dataset_for(const RunConfig& c) { return make_dataset(c.train.data, c.train.vocab); }

std::vector<std::string> prompt_ids(const Options& o, const Dataset& ds) {
    return o.prompts.empty() ? memorized_ids(ds) : o.prompts;
}

json prompt_json(const std::string& id, const ResolvedPrompt& p) {
    return {{"id", id}, {"tokens", p.prompt.tokens}, {"duplicated", p.duplicated}};
}

MetricConfig metric_config(const RunConfig& c) { return {c.seeds.evaluation, c.sampling_steps}; }

void write_ppm(const LatentImage& img, const fs::path& path) {
    if (img.channels != 3) throw ShapeError("ppm export needs 3 channels");
    std::ofstream f(path, std::ios::binary);
    f << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const double v = std::clamp((img.at(ch, y, x) + 1.0) * 127.5, 0.0, 255.0);
                f.put(static_cast<char>(static_cast<unsigned char>(std::lround(v))));
            }
}

std::string image_hash(const LatentImage& img) {
    return hex64(fnv1a(img.data.data(), sizeof(double) * img.data.size()));
}

int cmd_train(const Options& o) {
    const RunConfig c = load_config(o);
    const fs::path dir = make_run_dir(c, "train");
    std::ofstream log(dir / "train_log.csv");
    log << "step,loss,learning_rate\n";
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train_model(c.train, [&](const TrainLogEntry& e) {
        std::cerr << "step " << e.step << " loss " << e.loss << '\n';
    });
    for (const auto& e : r.log) log << e.step << ',' << e.loss << ',' << e.learning_rate << '\n';
    save_model(r.model, dir / "model.nemo");
    json report = provenance(c);
    report["model_hash"] = model_hash(r.model);
    report["final_loss"] = r.final_loss;
    report["converged"] = r.converged;
    report["memorized_prompts"] = memorized_ids(r.dataset);
    report["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json(dir / "train.json", report);
    std::cout << (dir / "model.nemo").string() << '\n';
    if (!r.converged) {
        std::cerr << "training did not converge: final loss " << r.final_loss << " above " << c.train.loss_ceiling
                  << '\n';
        return kNonConvergence;
    }
    return kOk;
}

int cmd_calibrate(const Options& o) {
    const RunConfig c = load_config(o);
    const DenoiserModel model = require_model(o);
    const fs::path dir = make_run_dir(c, "calibrate");
    const Calibration cal = calibrate(c, model);
    json report = provenance(c);
    report["model_hash"] = model_hash(model);
    report["calibration"] = to_json(cal);
    write_json(dir / "threshold.json", report);
    std::printf("tau_mem %.6f (mean %.6f std %.6f over %d prompts)\n", cal.tau.tau_mem, cal.tau.mean, cal.tau.std,
                cal.tau.holdout_size);
    std::cout << (dir / "threshold.json").string() << '\n';
    return kOk;
}

int cmd_localize(const Options& o) {
    const RunConfig c = load_config(o);
    const DenoiserModel model = require_model(o);
    const Calibration cal = require_threshold(o, c, model);
    const Dataset ds = dataset_for(c);
    const fs::path dir = make_run_dir(c, "localize");
    json report = provenance(c);
    report["model_hash"] = model_hash(model);
    report["tau_mem"] = to_json(cal.tau);
    json results = json::array();
    for (const auto& id : prompt_ids(o, ds)) {
        const ResolvedPrompt p = resolve_prompt(c, ds, id);
        const SelectionResult r = localize(model.embed(p.prompt.tokens), model, cal.stats, cal.tau, c.localizer);
        json entry = prompt_json(id, p);
        entry["selection"] = to_json(r);
        results.push_back(entry);
        std::printf("%-16s |s_initial| %3zu |s_final| %3zu theta %.2f k %d\n", id.c_str(), r.s_initial.size(),
                    r.s_final.size(), r.theta_act_final, r.k_final);
    }
    report["results"] = results;
    write_json(dir / "localize.json", report);
    std::cout << (dir / "localize.json").string() << '\n';
    return kOk;
}

// Neurons for one prompt: from a previous localize report when given, else
// localized now.
NeuronSet neurons_for(const Options& o, const std::string& id, const PromptEmbedding& y, const DenoiserModel& model,
                      const Calibration& cal, const RunConfig& c) {
    if (!o.selection_path.empty()) {
        const json report = read_json(o.selection_path);
        for (const auto& e : report.at("results"))
            if (e.at("id").get<std::string>() == id) return neuron_set_from_json(e.at("selection").at("s_final"));
        throw DomainError("prompt '" + id + "' not found in " + o.selection_path);
    }
    return localize(y, model, cal.stats, cal.tau, c.localizer).s_final;
}

int cmd_mitigate(const Options& o) {
    const RunConfig c = load_config(o);
    const DenoiserModel model = require_model(o);
    const Calibration cal = require_threshold(o, c, model);
    const Dataset ds = dataset_for(c);
    const MetricConfig mc = metric_config(c);
    const fs::path dir = make_run_dir(c, "mitigate");
    json report = provenance(c);
    report["model_hash"] = model_hash(model);
    report["scale"] = c.mitigation_scale;
    json results = json::array();
    for (const auto& id : prompt_ids(o, ds)) {
        const ResolvedPrompt p = resolve_prompt(c, ds, id);
        const PromptEmbedding y = model.embed(p.prompt.tokens);
        const NeuronSet s = neurons_for(o, id, y, model, cal, c);
        const auto unmasked = generate(y, model, {}, mc);
        const auto masked = generate(y, model, NeuronMask::scaled(s, c.mitigation_scale), mc);
        json images = json::array();
        for (std::size_t i = 0; i < masked.size(); ++i) {
            const std::string name = id + "_seed" + std::to_string(mc.seeds[i]);
            write_ppm(unmasked[i], dir / (name + "_unmasked.ppm"));
            write_ppm(masked[i], dir / (name + "_masked.ppm"));
            images.push_back({{"seed", mc.seeds[i]},
                              {"unmasked_hash", image_hash(unmasked[i])},
                              {"masked_hash", image_hash(masked[i])}});
        }
        json entry = prompt_json(id, p);
        entry["neurons"] = to_json(s);
        entry["sscd_gen_proxy"] = sscd_gen_from(masked, unmasked);
        entry["diversity_unmasked"] = diversity_from(unmasked);
        entry["diversity_masked"] = diversity_from(masked);
        if (p.training_image) {
            entry["sscd_orig_unmasked"] = sscd_orig_from(unmasked, *p.training_image);
            entry["sscd_orig_masked"] = sscd_orig_from(masked, *p.training_image);
        }
        entry["images"] = images;
        std::printf("%-16s neurons %3zu sscd_gen %.4f diversity %.4f -> %.4f\n", id.c_str(), s.size(),
                    entry["sscd_gen_proxy"].get<double>(), entry["diversity_unmasked"].get<double>(),
                    entry["diversity_masked"].get<double>());
        results.push_back(entry);
    }
    report["results"] = results;
    write_json(dir / "mitigate.json", report);
    std::cout << (dir / "mitigate.json").string() << '\n';
    return kOk;
}

json summary_stats(const std::vector<double>& v) {
    if (v.empty()) return nullptr;
    return {{"median", median(v)}, {"mad", median_abs_deviation(v)}, {"n", v.size()}};
}

int cmd_evaluate(const Options& o) {
    const RunConfig c = load_config(o);
    const DenoiserModel model = require_model(o);
    const Calibration cal = require_threshold(o, c, model);
    const Dataset ds = dataset_for(c);
    const MetricConfig mc = metric_config(c);
    const fs::path dir = make_run_dir(c, "evaluate");

    const auto holdout = evaluation_prompts(c);
    const auto holdout_y = embed_all(model, holdout);
    const auto probes = quality_probes(model, holdout_y);

    std::ofstream csv(dir / "eval.csv");
    csv << kEvalCsvHeader << '\n';
    json prompts = json::array();
    std::vector<double> mem_scores, hold_scores, gen_nemo, gen_random, div_drop;
    NeuronSet all_found;
    for (const auto& id : prompt_ids(o, ds)) {
        const ResolvedPrompt p = resolve_prompt(c, ds, id);
        const PromptEmbedding y = model.embed(p.prompt.tokens);
        const SelectionResult r = localize(y, model, cal.stats, cal.tau, c.localizer);
        all_found.insert(r.s_final.begin(), r.s_final.end());
        const Detection det = detect_memorized(y, model, cal.tau, c.seeds.localization);
        (p.duplicated ? mem_scores : hold_scores).push_back(det.score);
        const MemType type = classify_mem_type(y, p.training_image ? &*p.training_image : nullptr, model, cal.tau,
                                               c.seeds.localization, mc);
        const auto unmasked = generate(y, model, {}, mc);

        auto row_for = [&](const std::string& condition, const NeuronMask& mask, int count) {
            const auto gen = mask.empty() ? unmasked : generate(y, model, mask, mc);
            EvalReport row{id, condition};
            row.sscd_orig_proxy = p.training_image ? sscd_orig_from(gen, *p.training_image) : std::nan("");
            row.sscd_gen_proxy = sscd_gen_from(gen, unmasked);
            row.diversity_proxy = diversity_from(gen);
            row.quality_delta = quality_delta(model, mask, probes);
            row.deactivated_count = count;
            row.mem_type = type;
            write_csv_row(csv, row);
            return row;
        };
        const int n = static_cast<int>(r.s_final.size());
        const EvalReport base = row_for("unmasked", {}, 0);
        const EvalReport nemo = row_for("nemo", NeuronMask::deactivate(r.s_final), n);
        json entry = prompt_json(id, p);
        entry["selection"] = to_json(r);
        entry["detection_score"] = det.score;
        entry["mem_type"] = to_string(type);
        entry["sscd_gen_nemo"] = nemo.sscd_gen_proxy;
        entry["diversity_unmasked"] = base.diversity_proxy;
        entry["diversity_nemo"] = nemo.diversity_proxy;
        if (c.mitigation_scale != 0.0)
            entry["sscd_gen_scaled"] = row_for("scaled", NeuronMask::scaled(r.s_final, c.mitigation_scale), n).sscd_gen_proxy;
        if (p.duplicated && n > 0) {
            gen_nemo.push_back(nemo.sscd_gen_proxy);
            div_drop.push_back(base.diversity_proxy - nemo.diversity_proxy);
            try {
                const NeuronSet rnd = random_baseline(r.s_final, model, c.seeds.baseline_base);
                gen_random.push_back(row_for("random", NeuronMask::deactivate(rnd), n).sscd_gen_proxy);
            } catch (const DomainError& e) {
                entry["random_baseline_error"] = e.what();
            }
        }
        std::printf("%-16s %-8s score %.4f |s_final| %3d sscd_gen %.4f\n", id.c_str(), to_string(type).c_str(),
                    det.score, n, nemo.sscd_gen_proxy);
        prompts.push_back(entry);
    }

    int empty = 0;
    for (std::size_t i = 0; i < holdout.size(); ++i) {
        const Detection det = detect_memorized(holdout_y[i], model, cal.tau, c.seeds.localization);
        hold_scores.push_back(det.score);
        empty += localize(holdout_y[i], model, cal.stats, cal.tau, c.localizer).s_final.empty();
    }

    json report = provenance(c);
    report["model_hash"] = model_hash(model);
    report["tau_mem"] = to_json(cal.tau);
    report["prompts"] = prompts;
    json summary;
    if (!mem_scores.empty()) summary["detection_auroc"] = auroc(mem_scores, hold_scores);
    summary["sscd_gen_nemo"] = summary_stats(gen_nemo);
    summary["sscd_gen_random"] = summary_stats(gen_random);
    summary["diversity_drop"] = summary_stats(div_drop);
    summary["quality_delta_all_found"] = quality_delta(model, NeuronMask::deactivate(all_found), probes);
    summary["holdout_empty_fraction"] = static_cast<double>(empty) / holdout.size();
    report["summary"] = summary;
    write_json(dir / "evaluate.json", report);
    std::cout << summary.dump(2) << '\n' << (dir / "evaluate.json").string() << '\n';
    return kOk;
}

int cmd_oracle(const Options& o) {
    const RunConfig c = load_config(o);
    const fs::path dir = make_run_dir(c, "oracle");
    json report = provenance(c);
    json results = json::array();
    auto run = [&](const std::string& id, const PromptEmbedding& y, const DenoiserModel& model, const MemThreshold& tau,
                   const ActivationStats& stats) {
        const OracleCertificate cert = brute_force_minimal_sets(y, model, tau, o.max_card, c.seeds.localization, id);
        const SelectionResult r = localize(y, model, stats, tau, c.localizer);
        json entry = to_json(cert);
        entry["id"] = id;
        entry["minimum_cardinality"] = cert.minimum_cardinality();
        entry["s_final"] = to_json(r.s_final);
        results.push_back(entry);
        std::printf("%-16s minimum %d (%zu sets, %ld evaluations) |s_final| %zu\n", id.c_str(),
                    cert.minimum_cardinality(), cert.minimal_sets.size(), cert.evaluations, r.s_final.size());
    };
    if (o.planted) {
        const PlantedFixture f = make_planted_fixture();
        const MemThreshold tau = calibrate_threshold(f.model, f.holdout, c.seeds.localization, c.sigma_multiplier);
        run("planted", f.planted, f.model, tau, compute_activation_stats(f.model, f.holdout));
        report["model_hash"] = model_hash(f.model);
    } else {
        const DenoiserModel model = require_model(o);
        const Calibration cal = require_threshold(o, c, model);
        const Dataset ds = dataset_for(c);
        for (const auto& id : prompt_ids(o, ds))
            run(id, model.embed(resolve_prompt(c, ds, id).prompt.tokens), model, cal.tau, cal.stats);
        report["model_hash"] = model_hash(model);
    }
    report["results"] = results;
    write_json(dir / "oracle.json", report);
    std::cout << (dir / "oracle.json").string() << '\n';
    return kOk;
}

// Summarizes every JSON report of a run directory as markdown.
int cmd_report(const Options& o) {
    if (o.run_dir.empty() || !fs::is_directory(o.run_dir)) throw UsageError("report needs an existing run directory");
    std::ostringstream md;
    md << "# Run " << fs::path(o.run_dir).filename().string() << "\n\n";
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(o.run_dir))
        if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw FormatError("no reports in '" + o.run_dir + "'");
    for (const auto& f : files) {
        const json j = read_json(f);
        md << "## " << f.filename().string() << "\n\n";
        if (j.contains("config_hash")) md << "- config hash: `" << j["config_hash"].get<std::string>() << "`\n";
        if (j.contains("model_hash")) md << "- model hash: `" << j["model_hash"].get<std::string>() << "`\n";
        if (j.contains("seeds")) md << "- seeds: `" << j["seeds"].dump() << "`\n";
        if (j.contains("final_loss")) md << "- final loss: " << j["final_loss"] << "\n";
        if (j.contains("calibration")) md << "- tau_mem: " << j["calibration"]["tau"]["tau_mem"] << "\n";
        if (j.contains("summary"))
            for (const auto& [k, v] : j["summary"].items()) md << "- " << k << ": " << v.dump() << "\n";
        if (j.contains("results") || j.contains("prompts")) {
            md << "\n| prompt | neurons |\n|---|---|\n";
            for (const auto& r : j.contains("results") ? j["results"] : j["prompts"]) {
                json set = r.contains("selection") ? r["selection"]["s_final"]
                                                   : (r.contains("neurons") ? r["neurons"] : r.value("s_final", json()));
                md << "| " << r["id"].get<std::string>() << " | " << set.size() << " |\n";
            }
        }
        md << "\n";
    }
    std::ofstream(fs::path(o.run_dir) / "report.md") << md.str();
    std::cout << md.str();
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Localize and switch off memorization neurons in a toy text-to-image diffusion model"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "run configuration (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--jobs", o.jobs, "worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
        sub->add_option("--seed-registry", o.seed_registry_path, "seed registry (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--out", o.out, "parent directory of run directories");
    };
    auto with_model = [&](CLI::App* sub) {
        common(sub);
        sub->add_option("--model", o.model_path, "model weights")->check(CLI::ExistingFile);
        sub->add_option("--threshold", o.threshold_path, "threshold.json from calibrate")->check(CLI::ExistingFile);
        sub->add_option("--prompts", o.prompts, "prompt ids (mem-i, train-i, holdout-<seed>-<i>)");
    };
    CLI::App* train = app.add_subcommand("train", "train a model from the config");
    common(train);
    CLI::App* cal = app.add_subcommand("calibrate", "memorization threshold and activation statistics");
    common(cal);
    cal->add_option("--model", o.model_path, "model weights")->check(CLI::ExistingFile)->required();
    CLI::App* loc = app.add_subcommand("localize", "find memorization neurons");
    with_model(loc);
    CLI::App* mit = app.add_subcommand("mitigate", "generate with found neurons scaled");
    with_model(mit);
    mit->add_option("--scale", o.scale, "scale factor for the found neurons (0 deactivates)");
    mit->add_option("--selection", o.selection_path, "localize.json to take neurons from")->check(CLI::ExistingFile);
    CLI::App* ev = app.add_subcommand("evaluate", "full metric table");
    with_model(ev);
    ev->add_option("--scale", o.scale, "extra scaled condition");
    CLI::App* orc = app.add_subcommand("oracle", "exhaustive minimal neuron sets");
    with_model(orc);
    orc->add_option("--max-card", o.max_card, "largest set size to enumerate")->check(CLI::Range(1, kOracleMaxCardinality));
    orc->add_flag("--planted", o.planted, "use the built-in planted single-neuron fixture");
    CLI::App* rep = app.add_subcommand("report", "summarize a run directory");
    rep->add_option("run_dir", o.run_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }
    if (o.jobs > 0) set_jobs(o.jobs);
    try {
        if (*train) return cmd_train(o);
        if (*cal) return cmd_calibrate(o);
        if (*loc) return cmd_localize(o);
        if (*mit) return cmd_mitigate(o);
        if (*ev) return cmd_evaluate(o);
        if (*orc) return cmd_oracle(o);
        if (*rep) return cmd_report(o);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const NonConvergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNonConvergence;
    } catch (const BudgetError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
    return kUsage;
}
