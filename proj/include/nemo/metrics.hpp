#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "nemo/data.hpp"
#include "nemo/mem_score.hpp"
#include "nemo/model.hpp"

namespace nemo {

// Fixed image descriptor standing in for a learned copy-detection network:
// 4x4 average-pooled pixels followed by centered 8-bin per-channel intensity
// histograms over [-1, 1]. Unit norm.
struct ImageEmbedding {
    Vector vector;

    double cosine(const ImageEmbedding& other) const;
};

inline constexpr int kEmbedGrid = 4;
inline constexpr int kEmbedBins = 8;

ImageEmbedding embed(const LatentImage& image);

struct MetricConfig {
    std::vector<std::uint64_t> seeds = SeedRegistry::defaults().evaluation;
    int sampling_steps = 50;
};

// Generations for every seed of `config`, in seed order.
std::vector<LatentImage> generate(const PromptEmbedding& prompt, const DenoiserModel& model, const NeuronMask& mask,
                                  const MetricConfig& config = {}, const Ablation* ablation = nullptr);

// Mean cosine between masked and unmasked generations paired by seed.
double sscd_gen_proxy(const PromptEmbedding& prompt, const DenoiserModel& model, const NeuronMask& mask,
                      const MetricConfig& config = {});

// Maximum cosine between a generation and the training image.
double sscd_orig_proxy(const PromptEmbedding& prompt, const LatentImage& training_image, const DenoiserModel& model,
                       const NeuronMask& mask, const MetricConfig& config = {}, const Ablation* ablation = nullptr);

// Mean pairwise cosine across seeds. Lower is more diverse.
double diversity_proxy(const PromptEmbedding& prompt, const DenoiserModel& model, const NeuronMask& mask,
                       const MetricConfig& config = {});

double sscd_gen_from(const std::vector<LatentImage>& masked, const std::vector<LatentImage>& unmasked);
double sscd_orig_from(const std::vector<LatentImage>& generated, const LatentImage& training_image);
double diversity_from(const std::vector<LatentImage>& generated);

enum class MemType { none, template_, verbatim };

inline constexpr double kVerbatimThreshold = 0.7;

std::string to_string(MemType type);

// Verbatim when some generation reaches kVerbatimThreshold against the
// training image, template when only the noise-difference detector fires.
// Without a training image only template/none are possible.
MemType classify_mem_type(const PromptEmbedding& prompt, const LatentImage* training_image, const DenoiserModel& model,
                          const MemThreshold& tau, const std::vector<std::uint64_t>& detection_seeds,
                          const MetricConfig& config = {});

// Fixed denoising probes (x0, eps, t) drawn per prompt from `seed`.
struct QualityProbe {
    PromptEmbedding prompt;
    LatentImage x0;
    LatentImage noise;
    int timestep = 0;
};

std::vector<QualityProbe> quality_probes(const DenoiserModel& model, const std::vector<PromptEmbedding>& prompts,
                                         int per_prompt = 8, std::uint64_t seed = 4242);

double mean_denoising_mse(const DenoiserModel& model, const std::vector<QualityProbe>& probes, const NeuronMask& mask,
                          const Ablation* ablation = nullptr);

// Masked over unmasked mean denoising error on the probes. 1 for an empty mask.
double quality_delta(const DenoiserModel& model, const NeuronMask& mask, const std::vector<QualityProbe>& probes,
                     const Ablation* ablation = nullptr);
double quality_delta(const DenoiserModel& model, const NeuronMask& mask, const std::vector<PromptEmbedding>& holdout);

// How much the model still uses the prompt: mean error with an all-padding
// prompt minus mean error with the real prompt, on the same probes.
double prompt_usage_gap(const DenoiserModel& model, const NeuronMask& mask, const std::vector<QualityProbe>& probes);

// A set with the same per-layer counts as `exclude`, disjoint from it. Throws
// DomainError if a layer lacks enough neurons outside `exclude`.
NeuronSet random_baseline(const NeuronSet& exclude, const DenoiserModel& model, std::uint64_t seed);

// Every neuron of one value layer.
NeuronSet layer_neurons(const DenoiserModel& model, int layer);

struct LabeledPrompt {
    std::string id;
    PromptEmbedding prompt;
    std::optional<LatentImage> training_image;
};

struct AblationRow {
    std::string kind;  // "value", "key" or "conv50"
    int layer = 0;     // value layer or block, from 1
    std::string prompt_id;
    double sscd_orig = 0.0;  // NaN without a training image
    double memorization = 0.0;
    double quality = 1.0;
};

// Whole value layers and key layers switched off one at a time, plus a random
// half of each block's convolution channels.
std::vector<AblationRow> layer_ablation_study(const DenoiserModel& model, const std::vector<LabeledPrompt>& prompts,
                                              const std::vector<QualityProbe>& probes,
                                              const std::vector<std::uint64_t>& detection_seeds,
                                              const MetricConfig& config = {}, std::uint64_t seed = 301);

struct EvalReport {
    std::string prompt_id;
    std::string condition;
    double sscd_orig_proxy = 0.0;
    double sscd_gen_proxy = 1.0;
    double diversity_proxy = 0.0;
    double quality_delta = 1.0;
    int deactivated_count = 0;
    MemType mem_type = MemType::none;
};

inline constexpr const char* kEvalCsvHeader =
    "prompt_id,condition,sscd_orig_proxy,sscd_gen_proxy,diversity_proxy,quality_delta,deactivated_count,mem_type";

void write_csv_row(std::ostream& out, const EvalReport& row);

// Probability that a random positive outscores a random negative; ties count half.
double auroc(const std::vector<double>& positives, const std::vector<double>& negatives);

double median(std::vector<double> values);
// Median absolute deviation from the median.
double median_abs_deviation(const std::vector<double>& values);

}  // namespace nemo
