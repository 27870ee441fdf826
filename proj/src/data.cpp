#include "nemo/data.hpp"

#include <algorithm>
#include <cmath>

namespace nemo {

namespace {

double uniform_in(GaussianSource& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

// Stream tags keep the dataset, holdout and memorized draws independent.
constexpr std::uint64_t kMemorizedStream = 0x6d656d6f72697a65ULL;
constexpr std::uint64_t kUniqueStream = 0x756e69717565ULL;
constexpr std::uint64_t kHoldoutStream = 0x686f6c646f7574ULL;

}  // namespace

const TrainingPair* Dataset::find(const std::string& prompt_id) const {
    for (const auto& p : pairs)
        if (p.prompt.id == prompt_id) return &p;
    return nullptr;
}

LatentImage procedural_image(int channels, int size, GaussianSource& rng) {
    LatentImage img(channels, size, size);
    std::vector<double> base(channels), slope_x(channels), slope_y(channels);
    for (int c = 0; c < channels; ++c) {
        base[c] = uniform_in(rng, -0.6, 0.6);
        slope_x[c] = uniform_in(rng, -0.4, 0.4);
        slope_y[c] = uniform_in(rng, -0.4, 0.4);
    }
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double fx = (x + 0.5) / size - 0.5;
                const double fy = (y + 0.5) / size - 0.5;
                img.at(c, y, x) = base[c] + slope_x[c] * fx + slope_y[c] * fy;
            }

    const int shapes = 1 + static_cast<int>(rng.below(3));
    for (int s = 0; s < shapes; ++s) {
        const bool circle = rng.below(2) == 0;
        const double cx = uniform_in(rng, 0.15, 0.85) * size;
        const double cy = uniform_in(rng, 0.15, 0.85) * size;
        const double rx = uniform_in(rng, 0.12, 0.3) * size;
        const double ry = circle ? rx : uniform_in(rng, 0.12, 0.3) * size;
        std::vector<double> color(channels);
        for (auto& v : color) v = uniform_in(rng, -1.0, 1.0);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double dx = (x + 0.5 - cx) / rx;
                const double dy = (y + 0.5 - cy) / ry;
                const bool inside = circle ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
                if (!inside) continue;
                for (int c = 0; c < channels; ++c) img.at(c, y, x) = color[c];
            }
    }
    img.data = img.data.cwiseMax(-1.0).cwiseMin(1.0);
    return img;
}

Prompt random_common_prompt(const Vocabulary& vocab, GaussianSource& rng, std::string id) {
    Prompt p;
    p.id = std::move(id);
    const int span = vocab.max_length - vocab.min_length + 1;
    const int length = vocab.min_length + static_cast<int>(rng.below(span));
    for (int i = 0; i < length; ++i) p.tokens.push_back(1 + static_cast<int>(rng.below(vocab.common_count())));
    return p;
}

Dataset make_dataset(const DatasetConfig& config, const Vocabulary& vocab) {
    if (config.duplication < 1) throw DomainError("dataset: duplication factor must be >= 1");
    if (config.memorized_prompts * config.rare_per_prompt > vocab.rare_tokens)
        throw DomainError("dataset: not enough reserved tokens for the memorized prompts");

    Dataset ds;
    GaussianSource mem_rng(config.seed ^ kMemorizedStream);
    for (int m = 0; m < config.memorized_prompts; ++m) {
        TrainingPair pair;
        pair.prompt = random_common_prompt(vocab, mem_rng, "mem-" + std::to_string(m));
        // Reserved tokens replace the first positions so the prompt keeps its length.
        auto& tokens = pair.prompt.tokens;
        if (static_cast<int>(tokens.size()) > vocab.max_length - config.rare_per_prompt)
            tokens.resize(vocab.max_length - config.rare_per_prompt);
        for (int r = 0; r < config.rare_per_prompt; ++r)
            tokens.insert(tokens.begin() + r, vocab.first_rare() + m * config.rare_per_prompt + r);
        pair.image = procedural_image(config.image_channels, config.image_size, mem_rng);
        pair.copies = config.duplication;
        ds.pairs.push_back(std::move(pair));
    }
    ds.memorized_count = config.memorized_prompts;

    GaussianSource rng(config.seed ^ kUniqueStream);
    for (int u = 0; u < config.unique_pairs; ++u) {
        TrainingPair pair;
        pair.prompt = random_common_prompt(vocab, rng, "train-" + std::to_string(u));
        pair.image = procedural_image(config.image_channels, config.image_size, rng);
        ds.pairs.push_back(std::move(pair));
    }

    for (int i = 0; i < static_cast<int>(ds.pairs.size()); ++i)
        for (int c = 0; c < ds.pairs[i].copies; ++c) ds.expanded.push_back(i);
    return ds;
}

std::vector<Prompt> holdout_prompts(const Vocabulary& vocab, int count, std::uint64_t seed) {
    GaussianSource rng(seed ^ kHoldoutStream);
    std::vector<Prompt> out;
    for (int i = 0; i < count; ++i)
        out.push_back(random_common_prompt(vocab, rng, "holdout-" + std::to_string(seed) + "-" + std::to_string(i)));
    return out;
}

}  // namespace nemo
