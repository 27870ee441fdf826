#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nemo/rng.hpp"
#include "nemo/tensor.hpp"

namespace nemo {

struct Prompt {
    std::string id;
    std::vector<int> tokens;  // unpadded
};

// Synthetic prompt vocabulary: token 0 pads, the top `rare_tokens` ids are
// reserved for the memorized prompts, the rest are shared by everybody.
struct Vocabulary {
    int size = 64;
    int pad = 0;
    int rare_tokens = 16;
    int min_length = 4;
    int max_length = 8;

    int first_rare() const { return size - rare_tokens; }
    int common_count() const { return first_rare() - 1; }
};

struct TrainingPair {
    Prompt prompt;
    LatentImage image;
    int copies = 1;
};

struct DatasetConfig {
    int unique_pairs = 2048;
    int memorized_prompts = 4;
    int duplication = 64;
    int rare_per_prompt = 2;
    int image_channels = 3;
    int image_size = 16;
    std::uint64_t seed = 7;
};

struct Dataset {
    std::vector<TrainingPair> pairs;  // memorized pairs first
    std::vector<int> expanded;        // pair index per training-set row (duplicates repeated)
    int memorized_count = 0;

    const TrainingPair& memorized(int i) const { return pairs.at(i); }
    const TrainingPair* find(const std::string& prompt_id) const;
};

// Random shapes over a gradient background, values in [-1, 1]. Every pixel is
// symmetric around 0 over the generator's distribution.
LatentImage procedural_image(int channels, int size, GaussianSource& rng);

Prompt random_common_prompt(const Vocabulary& vocab, GaussianSource& rng, std::string id);

Dataset make_dataset(const DatasetConfig& config, const Vocabulary& vocab);

// Fresh prompts drawn from the common tokens only; never seen in training
// because `seed` streams are disjoint from the dataset stream.
std::vector<Prompt> holdout_prompts(const Vocabulary& vocab, int count, std::uint64_t seed);

}  // namespace nemo
