#include "nemo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "nemo/ddpm.hpp"
#include "nemo/parallel.hpp"
#include "nemo/rng.hpp"

namespace nemo {

double ImageEmbedding::cosine(const ImageEmbedding& other) const {
    if (vector.size() != other.vector.size()) throw ShapeError("embedding dimensions differ");
    return std::clamp(vector.dot(other.vector), -1.0, 1.0);
}

ImageEmbedding embed(const LatentImage& image) {
    if (image.height % kEmbedGrid != 0 || image.width % kEmbedGrid != 0)
        throw ShapeError("embed: image side must be a multiple of 4");
    const int bh = image.height / kEmbedGrid, bw = image.width / kEmbedGrid;
    const int pooled = image.channels * kEmbedGrid * kEmbedGrid;
    Vector v = Vector::Zero(pooled + image.channels * kEmbedBins);
    for (int c = 0; c < image.channels; ++c) {
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x) {
                const double p = image.at(c, y, x);
                v((c * kEmbedGrid + y / bh) * kEmbedGrid + x / bw) += p / (bh * bw);
                const int bin = std::clamp(static_cast<int>(std::floor((p + 1.0) * 0.5 * kEmbedBins)), 0, kEmbedBins - 1);
                v(pooled + c * kEmbedBins + bin) += 1.0 / (image.height * image.width);
            }
        // Centered so that histogram mass alone does not make images look alike.
        v.segment(pooled + c * kEmbedBins, kEmbedBins).array() -= 1.0 / kEmbedBins;
    }
    const double n = v.norm();
    if (n > 0.0) v /= n;
    return {v};
}

std::vector<LatentImage> generate(const PromptEmbedding& prompt, const DenoiserModel& model, const NeuronMask& mask,
                                  const MetricConfig& config, const Ablation* ablation) {
    std::vector<LatentImage> out(config.seeds.size());
    parallel_for(static_cast<int>(out.size()), [&](int i) {
        out[i] = sample(model, prompt, config.seeds[i], config.sampling_steps, mask, ablation);
    });
    return out;
}

double sscd_gen_from(const std::vector<LatentImage>& masked, const std::vector<LatentImage>& unmasked) {
    if (masked.size() != unmasked.size() || masked.size() < 2)
        throw DomainError("sscd_gen_proxy: need at least two seeds on both sides");
    double sum = 0.0;
    for (std::size_t i = 0; i < masked.size(); ++i)
        sum += masked[i] == unmasked[i] ? 1.0 : embed(masked[i]).cosine(embed(unmasked[i]));
    return sum / masked.size();
}

double sscd_orig_from(const std::vector<LatentImage>& generated, const LatentImage& training_image) {
    if (generated.empty()) throw DomainError("sscd_orig_proxy: no generations");
    const ImageEmbedding ref = embed(training_image);
    double best = -1.0;
    for (const auto& g : generated) best = std::max(best, g == training_image ? 1.0 : embed(g).cosine(ref));
    return best;
}

double diversity_from(const std::vector<LatentImage>& generated) {
    if (generated.size() < 2) throw DomainError("diversity_proxy: need at least two seeds");
    std::vector<ImageEmbedding> e;
    for (const auto& g : generated) e.push_back(embed(g));
    double sum = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < e.size(); ++i)
        for (std::size_t j = i + 1; j < e.size(); ++j, ++pairs)
            sum += generated[i] == generated[j] ? 1.0 : e[i].cosine(e[j]);
    return sum / pairs;
}

double sscd_gen_proxy(const PromptEmbedding& prompt, const DenoiserModel& model, const NeuronMask& mask,
                      const MetricConfig& config) {
    if (config.seeds.size() < 2) throw DomainError("sscd_gen_proxy: need at least two seeds");
    if (mask.empty()) return 1.0;
    return sscd_gen_from(generate(prompt, model, mask, config), generate(prompt, model, {}, config));
}

double sscd_orig_proxy(const PromptEmbedding& prompt, const LatentImage& training_image, const DenoiserModel& model,
                       const NeuronMask& mask, const MetricConfig& config, const Ablation* ablation) {
    return sscd_orig_from(generate(prompt, model, mask, config, ablation), training_image);
}

double diversity_proxy(const PromptEmbedding& prompt, const DenoiserModel& model, const NeuronMask& mask,
                       const MetricConfig& config) {
    return diversity_from(generate(prompt, model, mask, config));
}

std::string to_string(MemType type) {
    switch (type) {
        case MemType::verbatim: return "verbatim";
        case MemType::template_: return "template";
        case MemType::none: break;
    }
    return "none";
}

MemType classify_mem_type(const PromptEmbedding& prompt, const LatentImage* training_image, const DenoiserModel& model,
                          const MemThreshold& tau, const std::vector<std::uint64_t>& detection_seeds,
                          const MetricConfig& config) {
    if (training_image && sscd_orig_proxy(prompt, *training_image, model, {}, config) >= kVerbatimThreshold)
        return MemType::verbatim;
    return detect_memorized(prompt, model, tau, detection_seeds).memorized ? MemType::template_ : MemType::none;
}

std::vector<QualityProbe> quality_probes(const DenoiserModel& model, const std::vector<PromptEmbedding>& prompts,
                                         int per_prompt, std::uint64_t seed) {
    const auto& cfg = model.config;
    GaussianSource rng(seed);
    std::vector<QualityProbe> out;
    for (const auto& p : prompts)
        for (int i = 0; i < per_prompt; ++i) {
            QualityProbe q;
            q.prompt = p;
            q.x0 = procedural_image(cfg.image_channels, cfg.image_size, rng);
            q.noise = gaussian_image(cfg.image_channels, cfg.image_size, cfg.image_size, rng);
            q.timestep = static_cast<int>(rng.below(model.schedule.steps()));
            out.push_back(std::move(q));
        }
    return out;
}

double mean_denoising_mse(const DenoiserModel& model, const std::vector<QualityProbe>& probes, const NeuronMask& mask,
                          const Ablation* ablation) {
    if (probes.empty()) throw DomainError("quality: no probes");
    std::vector<double> err(probes.size());
    parallel_for(static_cast<int>(probes.size()), [&](int i) {
        const auto& q = probes[i];
        const LatentImage x_t = add_noise(q.x0, q.noise, q.timestep, model.schedule);
        const LatentImage eps = predict_noise(model, x_t, q.timestep, q.prompt, mask, ablation);
        err[i] = (eps.data - q.noise.data).squaredNorm() / static_cast<double>(eps.size());
    });
    return std::accumulate(err.begin(), err.end(), 0.0) / err.size();
}

double quality_delta(const DenoiserModel& model, const NeuronMask& mask, const std::vector<QualityProbe>& probes,
                     const Ablation* ablation) {
    if (mask.empty() && !ablation) return 1.0;
    return mean_denoising_mse(model, probes, mask, ablation) / mean_denoising_mse(model, probes, {});
}

double quality_delta(const DenoiserModel& model, const NeuronMask& mask, const std::vector<PromptEmbedding>& holdout) {
    return quality_delta(model, mask, quality_probes(model, holdout));
}

double prompt_usage_gap(const DenoiserModel& model, const NeuronMask& mask, const std::vector<QualityProbe>& probes) {
    std::vector<QualityProbe> blank = probes;
    const PromptEmbedding empty = model.embed(std::vector<int>{});
    for (auto& q : blank) q.prompt = empty;
    return mean_denoising_mse(model, blank, mask) - mean_denoising_mse(model, probes, mask);
}

NeuronSet layer_neurons(const DenoiserModel& model, int layer) {
    NeuronSet s;
    for (int i = 0; i < model.layer_width(layer); ++i) s.insert({layer, i});
    return s;
}

NeuronSet random_baseline(const NeuronSet& exclude, const DenoiserModel& model, std::uint64_t seed) {
    std::map<int, int> counts;
    for (const auto& n : exclude) {
        if (n.layer < 1 || n.layer > model.value_layers() || n.index < 0 || n.index >= model.layer_width(n.layer))
            throw DomainError("random_baseline: neuron outside the model");
        ++counts[n.layer];
    }
    GaussianSource rng(seed);
    NeuronSet out;
    for (const auto& [layer, count] : counts) {
        std::vector<int> pool;
        for (int i = 0; i < model.layer_width(layer); ++i)
            if (!exclude.count({layer, i})) pool.push_back(i);
        if (static_cast<int>(pool.size()) < count)
            throw DomainError("random_baseline: layer " + std::to_string(layer) + " has too few other neurons");
        // Partial Fisher-Yates.
        for (int j = 0; j < count; ++j) {
            const auto pick = j + static_cast<int>(rng.below(pool.size() - j));
            std::swap(pool[j], pool[pick]);
            out.insert({layer, pool[j]});
        }
    }
    return out;
}

std::vector<AblationRow> layer_ablation_study(const DenoiserModel& model, const std::vector<LabeledPrompt>& prompts,
                                              const std::vector<QualityProbe>& probes,
                                              const std::vector<std::uint64_t>& detection_seeds,
                                              const MetricConfig& config, std::uint64_t seed) {
    std::vector<AblationRow> rows;
    const auto run = [&](const std::string& kind, int layer, const NeuronMask& mask, const Ablation* ablation) {
        const double quality = quality_delta(model, mask, probes, ablation);
        for (const auto& p : prompts) {
            AblationRow r;
            r.kind = kind;
            r.layer = layer;
            r.prompt_id = p.id;
            r.quality = quality;
            r.sscd_orig = p.training_image
                              ? sscd_orig_proxy(p.prompt, *p.training_image, model, mask, config, ablation)
                              : std::numeric_limits<double>::quiet_NaN();
            // Unfiltered self score of the ablated model's noise differences.
            std::vector<NoiseDifference> d(detection_seeds.size());
            const auto& cfg = model.config;
            const int last = model.schedule.steps() - 1;
            for (std::size_t i = 0; i < detection_seeds.size(); ++i) {
                const LatentImage x = initial_noise(cfg.image_channels, cfg.image_size, cfg.image_size, detection_seeds[i]);
                LatentImage delta = predict_noise(model, x, model.schedule.model_timestep[last], p.prompt, mask, ablation);
                delta.data -= x.data;
                d[i] = {min_max_normalize(delta), detection_seeds[i]};
            }
            r.memorization = self_memorization_score(d);
            rows.push_back(std::move(r));
        }
    };

    for (int l = 1; l <= model.value_layers(); ++l) run("value", l, NeuronMask::deactivate(layer_neurons(model, l)), nullptr);
    for (int l = 1; l <= model.value_layers(); ++l) {
        Ablation a;
        a.keys_off.insert(l);
        run("key", l, {}, &a);
    }
    GaussianSource rng(seed);
    for (int b = 1; b <= model.value_layers(); ++b) {
        std::vector<double> scale(model.config.channels, 1.0);
        std::vector<int> idx(model.config.channels);
        std::iota(idx.begin(), idx.end(), 0);
        for (int j = 0; j < model.config.channels / 2; ++j) {
            const auto pick = j + static_cast<int>(rng.below(idx.size() - j));
            std::swap(idx[j], idx[pick]);
            scale[idx[j]] = 0.0;
        }
        Ablation a;
        a.conv_scale[b] = scale;
        run("conv50", b, {}, &a);
    }
    return rows;
}

void write_csv_row(std::ostream& out, const EvalReport& r) {
    out << r.prompt_id << ',' << r.condition << ',' << r.sscd_orig_proxy << ',' << r.sscd_gen_proxy << ','
        << r.diversity_proxy << ',' << r.quality_delta << ',' << r.deactivated_count << ',' << to_string(r.mem_type)
        << '\n';
}

double auroc(const std::vector<double>& positives, const std::vector<double>& negatives) {
    if (positives.empty() || negatives.empty()) throw DomainError("auroc: need both classes");
    double wins = 0.0;
    for (double p : positives)
        for (double n : negatives) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
    return wins / (static_cast<double>(positives.size()) * negatives.size());
}

double median(std::vector<double> values) {
    if (values.empty()) throw DomainError("median of an empty list");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double median_abs_deviation(const std::vector<double>& values) {
    const double m = median(values);
    std::vector<double> dev;
    for (double v : values) dev.push_back(std::abs(v - m));
    return median(dev);
}

}  // namespace nemo
