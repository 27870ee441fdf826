#pragma once

#include <compare>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "nemo/ddpm.hpp"
#include "nemo/tensor.hpp"

namespace nemo {

// Addresses output channel `index` of the cross-attention value projection in
// value layer `layer`. Layers are numbered from 1 in registry order.
struct NeuronId {
    int layer = 1;
    int index = 0;

    auto operator<=>(const NeuronId&) const = default;
};

// Ordered by (layer, index), deduplicated.
using NeuronSet = std::set<NeuronId>;

// Per-neuron scale factors applied to value-projection outputs. Absent
// neurons keep scale 1; scale 0 deactivates.
class NeuronMask {
public:
    NeuronMask() = default;

    static NeuronMask deactivate(const NeuronSet& neurons) { return scaled(neurons, 0.0); }
    static NeuronMask scaled(const NeuronSet& neurons, double factor);

    void set(NeuronId id, double factor);
    double scale(NeuronId id) const;
    bool empty() const { return entries_.empty(); }
    const std::map<NeuronId, double>& entries() const { return entries_; }

    // Entrywise product: applying the result equals applying both masks.
    NeuronMask compose(const NeuronMask& other) const;

    bool operator==(const NeuronMask&) const = default;

private:
    std::map<NeuronId, double> entries_;
};

// Mean absolute value-layer activation per neuron, one vector per value layer.
struct ActivationMap {
    std::vector<Vector> layers;

    double at(NeuronId id) const { return layers.at(id.layer - 1)(id.index); }
    int layer_count() const { return static_cast<int>(layers.size()); }
};

// Whole-layer and convolutional interventions used by the ablation studies.
// Layers and blocks are numbered from 1.
struct Ablation {
    std::set<int> keys_off;                         // key projection output forced to 0
    std::map<int, std::vector<double>> conv_scale;  // per-output-channel scale of block convs
};

struct BlockSpec {
    int value_width = 32;
    bool downsample = false;  // halve resolution before the next block
};

// Architecture descriptor; serialized into model files.
struct ModelConfig {
    std::string profile = "toy";
    int image_channels = 3;
    int image_size = 16;
    int channels = 32;
    int groups = 8;
    int vocab = 64;
    int prompt_length = 8;
    int pad_token = 0;
    int text_width = 32;
    int time_width = 32;
    int time_hidden = 64;
    bool output_skip = true;
    // Mean-absolute token aggregation includes padding positions when set.
    bool activations_include_padding = true;
    std::vector<BlockSpec> blocks;

    int diffusion_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.006;
    BetaSpacing spacing = BetaSpacing::linear;

    int value_layers() const { return static_cast<int>(blocks.size()); }
    int resolution(int block) const;  // spatial side length at 0-based block
    void validate() const;
};

struct PromptEmbedding {
    std::vector<int> tokens;  // padded to prompt_length
    int length = 0;           // tokens before padding
    Matrix embedded;          // prompt_length x text_width
};

struct ConvWeights {
    Matrix w;  // out x (in * 9)
    Matrix b;  // out x 1
};

struct CrossAttentionLayer {
    Matrix w_q;  // channels x width
    Matrix w_k;  // text_width x width
    Matrix w_v;  // text_width x width
    Matrix w_o;  // width x channels

    int width() const { return static_cast<int>(w_v.cols()); }
};

struct BlockWeights {
    ConvWeights conv;
    Matrix time_w;  // time_hidden x channels
    Matrix time_b;  // channels x 1
    Matrix gamma;   // channels x 1
    Matrix beta;    // channels x 1
    CrossAttentionLayer attn;
};

struct Weights {
    Matrix token_embedding;     // vocab x text_width
    Matrix position_embedding;  // channels x pixels
    Matrix time_w1, time_b1, time_w2, time_b2;
    ConvWeights in_conv;
    std::vector<BlockWeights> blocks;
    std::vector<ConvWeights> decoder;  // one per block except the last
    ConvWeights out_conv;

    // Visits every tensor in registry order: f(name, matrix).
    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    Weights zeros_like() const;
    Eigen::Index parameter_count() const;

private:
    template <class W, class F>
    static void visit_impl(W& w, F& f) {
        f("token_embedding", w.token_embedding);
        f("position_embedding", w.position_embedding);
        f("time_w1", w.time_w1);
        f("time_b1", w.time_b1);
        f("time_w2", w.time_w2);
        f("time_b2", w.time_b2);
        f("in_conv.w", w.in_conv.w);
        f("in_conv.b", w.in_conv.b);
        for (std::size_t i = 0; i < w.blocks.size(); ++i) {
            auto& b = w.blocks[i];
            const std::string p = "block" + std::to_string(i + 1) + ".";
            f(p + "conv.w", b.conv.w);
            f(p + "conv.b", b.conv.b);
            f(p + "time_w", b.time_w);
            f(p + "time_b", b.time_b);
            f(p + "gamma", b.gamma);
            f(p + "beta", b.beta);
            f(p + "attn.w_q", b.attn.w_q);
            f(p + "attn.w_k", b.attn.w_k);
            f(p + "attn.w_v", b.attn.w_v);
            f(p + "attn.w_o", b.attn.w_o);
        }
        for (std::size_t i = 0; i < w.decoder.size(); ++i) {
            const std::string p = "decoder" + std::to_string(i + 1) + ".";
            f(p + "w", w.decoder[i].w);
            f(p + "b", w.decoder[i].b);
        }
        f("out_conv.w", w.out_conv.w);
        f("out_conv.b", w.out_conv.b);
    }
};

struct DenoiserModel {
    ModelConfig config;
    Weights weights;
    Schedule schedule;

    int value_layers() const { return config.value_layers(); }
    int layer_width(int layer) const { return config.blocks.at(layer - 1).value_width; }
    int neuron_count() const;
    NeuronSet all_neurons() const;

    // Pads/truncates to prompt_length and looks up the embedding table.
    PromptEmbedding embed(std::span<const int> tokens) const;
};

// Fresh model with seeded random initialization.
DenoiserModel init_model(const ModelConfig& config, std::uint64_t seed);

// softmax(Q K^T / sqrt(d)) V for every spatial position of `hidden`
// (channels x positions). Returns width x positions. `value_scale` scales V's
// columns before the weighted sum. When `recorder` is given it receives the
// mean over the first `recorded_tokens` rows (all rows if negative) of |V|,
// taken before scaling.
Matrix cross_attention(const Matrix& hidden, const Matrix& text, const CrossAttentionLayer& layer,
                       const Vector& value_scale, Vector* recorder = nullptr, int recorded_tokens = -1,
                       bool key_off = false);

// Noise prediction eps_theta(x_t, t, y) with value-layer masking applied in
// every registered layer.
LatentImage predict_noise(const DenoiserModel& model, const LatentImage& x_t, int timestep, const PromptEmbedding& prompt,
                          const NeuronMask& mask = {}, const Ablation* ablation = nullptr,
                          ActivationMap* recorder = nullptr);

// Value-layer activations for a prompt. They depend on the prompt only, so no
// denoising pass is needed.
ActivationMap record_activations(const DenoiserModel& model, const PromptEmbedding& prompt);

struct TrainingExample {
    LatentImage x0;
    LatentImage noise;
    int timestep = 0;
    std::vector<int> tokens;
};

// Mean squared noise-prediction error of one example; accumulates
// d(loss * weight)/d(params) into `grad`.
double loss_and_gradient(const DenoiserModel& model, const TrainingExample& example, Weights& grad,
                         double weight = 1.0);

double example_loss(const DenoiserModel& model, const TrainingExample& example);

// Sum over value layers of the mean |V| across the recorded tokens and the
// layer's neurons; accumulates d(penalty * weight)/d(params) into `grad`.
// Pushes each token onto few value neurons.
double value_sparsity_penalty(const DenoiserModel& model, const std::vector<int>& tokens, Weights* grad = nullptr,
                              double weight = 1.0);

}  // namespace nemo
