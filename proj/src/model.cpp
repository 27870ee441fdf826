#include "nemo/model.hpp"

#include <cmath>
#include <string>

#include "nemo/rng.hpp"

namespace nemo {

// ---------------------------------------------------------------------------
// Masks and configuration

NeuronMask NeuronMask::scaled(const NeuronSet& neurons, double factor) {
    NeuronMask m;
    for (const auto& id : neurons) m.entries_[id] = factor;
    return m;
}

void NeuronMask::set(NeuronId id, double factor) { entries_[id] = factor; }

double NeuronMask::scale(NeuronId id) const {
    const auto it = entries_.find(id);
    return it == entries_.end() ? 1.0 : it->second;
}

NeuronMask NeuronMask::compose(const NeuronMask& other) const {
    NeuronMask out = *this;
    for (const auto& [id, s] : other.entries_) out.entries_[id] = scale(id) * s;
    return out;
}

int ModelConfig::resolution(int block) const {
    int side = image_size;
    for (int b = 0; b < block; ++b)
        if (blocks[b].downsample) side /= 2;
    return side;
}

void ModelConfig::validate() const {
    if (blocks.size() < 2) throw DomainError("model config: need at least two value layers");
    if (channels % groups != 0) throw DomainError("model config: channels must be divisible by groups");
    if (time_width % 2 != 0) throw DomainError("model config: time_width must be even");
    if (prompt_length < 1 || vocab < 2 || pad_token < 0 || pad_token >= vocab)
        throw DomainError("model config: bad vocabulary/prompt settings");
    int side = image_size;
    for (const auto& b : blocks) {
        if (b.value_width < 1) throw DomainError("model config: value width must be positive");
        if (b.downsample) {
            if (side % 2 != 0 || side < 2) throw DomainError("model config: cannot downsample odd resolution");
            side /= 2;
        }
    }
    if (blocks.back().downsample) throw DomainError("model config: last block cannot downsample");
}

// ---------------------------------------------------------------------------
// Weights

Weights Weights::zeros_like() const {
    Weights z = *this;
    z.visit([](const std::string&, Matrix& m) { m.setZero(); });
    return z;
}

Eigen::Index Weights::parameter_count() const {
    Eigen::Index n = 0;
    visit([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
}

int DenoiserModel::neuron_count() const {
    int n = 0;
    for (const auto& b : config.blocks) n += b.value_width;
    return n;
}

NeuronSet DenoiserModel::all_neurons() const {
    NeuronSet s;
    for (int l = 1; l <= value_layers(); ++l)
        for (int i = 0; i < layer_width(l); ++i) s.insert({l, i});
    return s;
}

PromptEmbedding DenoiserModel::embed(std::span<const int> tokens) const {
    PromptEmbedding p;
    const int n = config.prompt_length;
    p.length = std::min<int>(static_cast<int>(tokens.size()), n);
    p.tokens.assign(n, config.pad_token);
    for (int i = 0; i < p.length; ++i) {
        if (tokens[i] < 0 || tokens[i] >= config.vocab)
            throw DomainError("embed: token " + std::to_string(tokens[i]) + " outside vocabulary");
        p.tokens[i] = tokens[i];
    }
    p.embedded.resize(n, config.text_width);
    for (int i = 0; i < n; ++i) p.embedded.row(i) = weights.token_embedding.row(p.tokens[i]);
    return p;
}

DenoiserModel init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    GaussianSource rng(seed);
    auto normal = [&](Eigen::Index r, Eigen::Index c, double stddev) {
        Matrix m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
        return m;
    };
    auto conv = [&](int in, int out, double gain) {
        ConvWeights cw;
        cw.w = normal(out, in * 9, gain * std::sqrt(2.0 / (in * 9)));
        cw.b = Matrix::Zero(out, 1);
        return cw;
    };

    const int c = config.channels;
    DenoiserModel model;
    model.config = config;
    model.schedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end, config.spacing);

    Weights& w = model.weights;
    w.token_embedding = normal(config.vocab, config.text_width, 1.0);
    w.position_embedding = normal(c, config.image_size * config.image_size, 0.1);
    w.time_w1 = normal(config.time_width, config.time_hidden, 1.0 / std::sqrt(config.time_width));
    w.time_b1 = Matrix::Zero(config.time_hidden, 1);
    w.time_w2 = normal(config.time_hidden, config.time_hidden, 1.0 / std::sqrt(config.time_hidden));
    w.time_b2 = Matrix::Zero(config.time_hidden, 1);
    w.in_conv = conv(config.image_channels, c, 1.0);
    for (const auto& spec : config.blocks) {
        BlockWeights b;
        const int d = spec.value_width;
        b.conv = conv(c, c, 1.0);
        b.time_w = normal(config.time_hidden, c, 1.0 / std::sqrt(config.time_hidden));
        b.time_b = Matrix::Zero(c, 1);
        b.gamma = Matrix::Ones(c, 1);
        b.beta = Matrix::Zero(c, 1);
        b.attn.w_q = normal(c, d, 1.0 / std::sqrt(c));
        b.attn.w_k = normal(config.text_width, d, 1.0 / std::sqrt(config.text_width));
        b.attn.w_v = normal(config.text_width, d, 1.0 / std::sqrt(config.text_width));
        b.attn.w_o = normal(d, c, 1.0 / std::sqrt(d));
        w.blocks.push_back(std::move(b));
    }
    for (int i = 0; i + 1 < config.value_layers(); ++i) w.decoder.push_back(conv(c, c, 1.0));
    w.out_conv = conv(c, config.image_channels, 0.1);
    return model;
}

// ---------------------------------------------------------------------------
// Primitive layers

namespace {

constexpr double kNormEps = 1e-5;

// Column p holds the 3x3 neighbourhood of pixel p, tap-major: rows [k*C, (k+1)*C)
// are the channels at tap k. Out-of-image taps are zero.
Matrix im2col(const Matrix& in, int side) {
    const Eigen::Index c = in.rows();
    Matrix cols(c * 9, static_cast<Eigen::Index>(side) * side);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            auto col = cols.col(y * side + x);
            for (int k = 0; k < 9; ++k) {
                const int sy = y + k / 3 - 1;
                const int sx = x + k % 3 - 1;
                if (sy >= 0 && sy < side && sx >= 0 && sx < side)
                    col.segment(k * c, c) = in.col(sy * side + sx);
                else
                    col.segment(k * c, c).setZero();
            }
        }
    }
    return cols;
}

void col2im_add(const Matrix& cols, int side, Matrix& out) {
    const Eigen::Index c = out.rows();
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const auto col = cols.col(y * side + x);
            for (int k = 0; k < 9; ++k) {
                const int sy = y + k / 3 - 1;
                const int sx = x + k % 3 - 1;
                if (sy >= 0 && sy < side && sx >= 0 && sx < side) out.col(sy * side + sx) += col.segment(k * c, c);
            }
        }
    }
}

Matrix conv_apply(const ConvWeights& cw, const Matrix& cols) {
    Matrix out = cw.w * cols;
    out.colwise() += cw.b.col(0);
    return out;
}

// dout -> weight grads, returns d(cols).
Matrix conv_backward(const ConvWeights& cw, const Matrix& cols, const Matrix& dout, ConvWeights& grad) {
    grad.w.noalias() += dout * cols.transpose();
    grad.b.col(0) += dout.rowwise().sum();
    return cw.w.transpose() * dout;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Matrix silu(const Matrix& m) {
    return m.unaryExpr([](double v) { return v * sigmoid(v); });
}

Matrix silu_grad(const Matrix& pre, const Matrix& dout) {
    return dout.binaryExpr(pre, [](double g, double v) {
        const double s = sigmoid(v);
        return g * s * (1.0 + v * (1.0 - s));
    });
}

void group_norm(const Matrix& u, int groups, Matrix& xhat, Vector& inv_std) {
    const Eigen::Index per = u.rows() / groups;
    xhat.resize(u.rows(), u.cols());
    inv_std.resize(groups);
    for (int g = 0; g < groups; ++g) {
        const auto block = u.middleRows(g * per, per);
        const double mean = block.mean();
        const double var = (block.array() - mean).square().mean();
        inv_std(g) = 1.0 / std::sqrt(var + kNormEps);
        xhat.middleRows(g * per, per) = (block.array() - mean) * inv_std(g);
    }
}

Matrix group_norm_backward(const Matrix& dxhat, const Matrix& xhat, const Vector& inv_std) {
    const int groups = static_cast<int>(inv_std.size());
    const Eigen::Index per = xhat.rows() / groups;
    const double n = static_cast<double>(per * xhat.cols());
    Matrix du(xhat.rows(), xhat.cols());
    for (int g = 0; g < groups; ++g) {
        const auto dx = dxhat.middleRows(g * per, per);
        const auto xh = xhat.middleRows(g * per, per);
        const double sum_dx = dx.sum();
        const double sum_dx_xh = dx.cwiseProduct(xh).sum();
        du.middleRows(g * per, per) = (inv_std(g) / n) * (n * dx.array() - sum_dx - xh.array() * sum_dx_xh);
    }
    return du;
}

Matrix avg_pool(const Matrix& in, int side) {
    const int half = side / 2;
    Matrix out(in.rows(), half * half);
    for (int y = 0; y < half; ++y)
        for (int x = 0; x < half; ++x)
            out.col(y * half + x) = 0.25 * (in.col(2 * y * side + 2 * x) + in.col(2 * y * side + 2 * x + 1) +
                                            in.col((2 * y + 1) * side + 2 * x) + in.col((2 * y + 1) * side + 2 * x + 1));
    return out;
}

// Gradient of avg_pool: spreads each pooled gradient over its 2x2 cell.
Matrix avg_pool_backward(const Matrix& dout, int side) {
    const int half = side / 2;
    Matrix din(dout.rows(), side * side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) din.col(y * side + x) = 0.25 * dout.col((y / 2) * half + x / 2);
    return din;
}

Matrix upsample(const Matrix& in, int side) {
    const int big = side * 2;
    Matrix out(in.rows(), big * big);
    for (int y = 0; y < big; ++y)
        for (int x = 0; x < big; ++x) out.col(y * big + x) = in.col((y / 2) * side + x / 2);
    return out;
}

Matrix upsample_backward(const Matrix& dout, int side) {
    const int big = side * 2;
    Matrix din = Matrix::Zero(dout.rows(), side * side);
    for (int y = 0; y < big; ++y)
        for (int x = 0; x < big; ++x) din.col((y / 2) * side + x / 2) += dout.col(y * big + x);
    return din;
}

Vector time_features(int timestep, int width) {
    const int half = width / 2;
    Vector s(width);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        s(i) = std::sin(timestep * freq);
        s(half + i) = std::cos(timestep * freq);
    }
    return s;
}

struct BlockTrace {
    Matrix cols;
    Matrix conv_out;  // before channel scaling
    Matrix xhat;
    Vector inv_std;
    Matrix normed;
    Matrix r;
    Matrix q, k, v, attn, o;
    Vector value_scale;
    Vector conv_scale;  // empty when no conv ablation
    bool key_off = false;
    Matrix out;
};

struct DecoderTrace {
    Matrix cols;
    Matrix pre;
};

struct ForwardTrace {
    Matrix text;
    Matrix in_cols;
    Vector t_feat, t_h1, t_a1, t_h2, t_a2;
    std::vector<BlockTrace> blocks;
    std::vector<DecoderTrace> decoder;  // indexed by block
    Matrix out_cols;
    Matrix eps;
};

// Attention core shared by cross_attention() and the traced block forward.
void attention_core(const Matrix& hidden, const Matrix& text, const CrossAttentionLayer& layer, const Vector& scale,
                    bool key_off, Matrix& q, Matrix& k, Matrix& v, Matrix& attn, Matrix& o) {
    const Eigen::Index d = layer.width();
    if (hidden.rows() != layer.w_q.rows() || text.cols() != layer.w_k.rows() || text.cols() != layer.w_v.rows() ||
        scale.size() != d || layer.w_q.cols() != d || layer.w_k.cols() != d)
        throw ShapeError("cross_attention: dimension mismatch");
    q.noalias() = layer.w_q.transpose() * hidden;  // d x P
    if (key_off)
        k = Matrix::Zero(text.rows(), d);
    else
        k.noalias() = text * layer.w_k;  // n x d
    v.noalias() = text * layer.w_v;      // n x d
    attn.noalias() = k * q;              // n x P
    attn /= std::sqrt(static_cast<double>(d));
    for (Eigen::Index p = 0; p < attn.cols(); ++p) {
        auto col = attn.col(p);
        const double mx = col.maxCoeff();
        col = (col.array() - mx).exp();
        col /= col.sum();
    }
    const Matrix vm = v * scale.asDiagonal();
    o.noalias() = vm.transpose() * attn;  // d x P
}

std::vector<Vector> value_scales(const DenoiserModel& model, const NeuronMask& mask) {
    std::vector<Vector> scales;
    for (int l = 1; l <= model.value_layers(); ++l) scales.push_back(Vector::Ones(model.layer_width(l)));
    for (const auto& [id, s] : mask.entries()) {
        if (id.layer < 1 || id.layer > model.value_layers() || id.index < 0 || id.index >= model.layer_width(id.layer))
            throw DomainError("mask references neuron outside the value-layer registry");
        scales[id.layer - 1](id.index) = s;
    }
    return scales;
}

int recorded_tokens(const ModelConfig& cfg, int length) {
    return cfg.activations_include_padding ? cfg.prompt_length : std::max(length, 1);
}

Matrix run_forward(const DenoiserModel& model, const Matrix& x, int timestep, const Matrix& text, int text_length,
                   const std::vector<Vector>& scales, const Ablation* ablation, ActivationMap* recorder,
                   ForwardTrace& tr) {
    const ModelConfig& cfg = model.config;
    const Weights& w = model.weights;
    const int layers = cfg.value_layers();
    tr.text = text;

    // Timestep embedding.
    tr.t_feat = time_features(timestep, cfg.time_width);
    tr.t_h1 = w.time_w1.transpose() * tr.t_feat + w.time_b1.col(0);
    tr.t_a1 = silu(tr.t_h1);
    tr.t_h2 = w.time_w2.transpose() * tr.t_a1 + w.time_b2.col(0);
    tr.t_a2 = silu(tr.t_h2);

    tr.in_cols = im2col(x, cfg.image_size);
    Matrix h = conv_apply(w.in_conv, tr.in_cols) + w.position_embedding;

    if (recorder) recorder->layers.assign(layers, Vector());
    tr.blocks.resize(layers);
    for (int b = 0; b < layers; ++b) {
        const BlockWeights& bw = w.blocks[b];
        BlockTrace& bt = tr.blocks[b];
        const int side = cfg.resolution(b);

        bt.cols = im2col(h, side);
        bt.conv_out = conv_apply(bw.conv, bt.cols);
        Matrix u = bt.conv_out;
        bt.conv_scale.resize(0);
        if (ablation) {
            const auto it = ablation->conv_scale.find(b + 1);
            if (it != ablation->conv_scale.end()) {
                if (static_cast<Eigen::Index>(it->second.size()) != u.rows())
                    throw ShapeError("ablation: conv scale size does not match channels");
                bt.conv_scale = Eigen::Map<const Vector>(it->second.data(), u.rows());
                u = bt.conv_scale.asDiagonal() * u;
            }
        }
        const Vector tbias = bw.time_w.transpose() * tr.t_a2 + bw.time_b.col(0);
        u.colwise() += tbias;
        group_norm(u, cfg.groups, bt.xhat, bt.inv_std);
        bt.normed = (bt.xhat.array().colwise() * bw.gamma.col(0).array()).colwise() + bw.beta.col(0).array();
        bt.r = h + silu(bt.normed);

        bt.value_scale = scales[b];
        bt.key_off = ablation && ablation->keys_off.count(b + 1) > 0;
        attention_core(bt.r, text, bw.attn, bt.value_scale, bt.key_off, bt.q, bt.k, bt.v, bt.attn, bt.o);
        if (recorder) {
            const int n = recorded_tokens(cfg, text_length);
            recorder->layers[b] = bt.v.topRows(n).cwiseAbs().colwise().mean().transpose();
        }
        bt.out = bt.r;
        bt.out.noalias() += bw.attn.w_o.transpose() * bt.o;

        h = cfg.blocks[b].downsample ? avg_pool(bt.out, side) : bt.out;
    }

    // Decoder: walk back up, adding encoder outputs as skips.
    tr.decoder.resize(layers);
    Matrix d = tr.blocks[layers - 1].out;
    for (int b = layers - 2; b >= 0; --b) {
        const int side = cfg.resolution(b);
        if (cfg.blocks[b].downsample) d = upsample(d, side / 2);
        d += tr.blocks[b].out;
        DecoderTrace& dt = tr.decoder[b];
        dt.cols = im2col(d, side);
        dt.pre = conv_apply(w.decoder[b], dt.cols);
        d = silu(dt.pre);
    }
    tr.out_cols = im2col(d, cfg.image_size);
    tr.eps = conv_apply(w.out_conv, tr.out_cols);
    if (cfg.output_skip) tr.eps += x;
    return tr.eps;
}

// Backpropagates d(loss)/d(eps) through a recorded pass. Returns d(loss)/d(text).
Matrix run_backward(const DenoiserModel& model, const ForwardTrace& tr, const Matrix& deps, Weights& g) {
    const ModelConfig& cfg = model.config;
    const Weights& w = model.weights;
    const int layers = cfg.value_layers();

    Matrix dcols = conv_backward(w.out_conv, tr.out_cols, deps, g.out_conv);
    Matrix dd = Matrix::Zero(cfg.channels, cfg.image_size * cfg.image_size);
    col2im_add(dcols, cfg.image_size, dd);

    std::vector<Matrix> dout(layers);
    for (int b = 0; b <= layers - 2; ++b) {
        const int side = cfg.resolution(b);
        const DecoderTrace& dt = tr.decoder[b];
        const Matrix dpre = silu_grad(dt.pre, dd);
        const Matrix dc = conv_backward(w.decoder[b], dt.cols, dpre, g.decoder[b]);
        Matrix din = Matrix::Zero(cfg.channels, side * side);
        col2im_add(dc, side, din);
        dout[b] = din;
        dd = cfg.blocks[b].downsample ? upsample_backward(din, side / 2) : din;
    }
    dout[layers - 1] = dd;

    Matrix dtext = Matrix::Zero(cfg.prompt_length, cfg.text_width);
    Vector da2 = Vector::Zero(cfg.time_hidden);
    Matrix dh;  // gradient w.r.t. the input of the block processed last
    for (int b = layers - 1; b >= 0; --b) {
        const BlockWeights& bw = w.blocks[b];
        BlockWeights& bg = g.blocks[b];
        const BlockTrace& bt = tr.blocks[b];
        const int side = cfg.resolution(b);
        const double d = bw.attn.width();

        Matrix dy = dout[b];
        if (b < layers - 1) dy += cfg.blocks[b].downsample ? avg_pool_backward(dh, side) : dh;

        // out = r + W_o^T o
        bg.attn.w_o.noalias() += bt.o * dy.transpose();
        const Matrix dobj = bw.attn.w_o * dy;
        Matrix dr = dy;

        // o = (v * scale)^T attn
        const Matrix vm = bt.v * bt.value_scale.asDiagonal();
        const Matrix dvm = bt.attn * dobj.transpose();
        const Matrix dattn = vm * dobj;
        Matrix ds = bt.attn.cwiseProduct(dattn);
        const Eigen::RowVectorXd colsum = ds.colwise().sum();
        ds -= bt.attn * colsum.asDiagonal();
        ds /= std::sqrt(d);

        const Matrix dq = bt.k.transpose() * ds;
        if (!bt.key_off) {
            const Matrix dk = ds * bt.q.transpose();
            bg.attn.w_k.noalias() += tr.text.transpose() * dk;
            dtext.noalias() += dk * bw.attn.w_k.transpose();
        }
        bg.attn.w_q.noalias() += bt.r * dq.transpose();
        dr.noalias() += bw.attn.w_q * dq;

        const Matrix dv = dvm * bt.value_scale.asDiagonal();
        bg.attn.w_v.noalias() += tr.text.transpose() * dv;
        dtext.noalias() += dv * bw.attn.w_v.transpose();

        // r = h + silu(normed)
        Matrix dhin = dr;
        const Matrix dn = silu_grad(bt.normed, dr);
        bg.gamma.col(0) += dn.cwiseProduct(bt.xhat).rowwise().sum();
        bg.beta.col(0) += dn.rowwise().sum();
        const Matrix dxhat = dn.array().colwise() * bw.gamma.col(0).array();
        Matrix du = group_norm_backward(dxhat, bt.xhat, bt.inv_std);

        const Vector dtb = du.rowwise().sum();
        bg.time_b.col(0) += dtb;
        bg.time_w.noalias() += tr.t_a2 * dtb.transpose();
        da2.noalias() += bw.time_w * dtb;

        if (bt.conv_scale.size() > 0) du = bt.conv_scale.asDiagonal() * du;
        const Matrix dc = conv_backward(bw.conv, bt.cols, du, bg.conv);
        col2im_add(dc, side, dhin);
        dh = std::move(dhin);
    }

    // h0 = in_conv(x) + position_embedding
    g.position_embedding += dh;
    conv_backward(w.in_conv, tr.in_cols, dh, g.in_conv);

    const Vector dh2 = silu_grad(tr.t_h2, da2);
    g.time_b2.col(0) += dh2;
    g.time_w2.noalias() += tr.t_a1 * dh2.transpose();
    const Vector da1 = w.time_w2 * dh2;
    const Vector dh1 = silu_grad(tr.t_h1, da1);
    g.time_b1.col(0) += dh1;
    g.time_w1.noalias() += tr.t_feat * dh1.transpose();
    return dtext;
}

}  // namespace

Matrix cross_attention(const Matrix& hidden, const Matrix& text, const CrossAttentionLayer& layer,
                       const Vector& value_scale, Vector* recorder, int recorded_tokens, bool key_off) {
    Matrix q, k, v, attn, o;
    attention_core(hidden, text, layer, value_scale, key_off, q, k, v, attn, o);
    if (recorder) {
        const Eigen::Index n = recorded_tokens < 0 ? v.rows() : std::min<Eigen::Index>(recorded_tokens, v.rows());
        *recorder = v.topRows(n).cwiseAbs().colwise().mean().transpose();
    }
    return o;
}

LatentImage predict_noise(const DenoiserModel& model, const LatentImage& x_t, int timestep, const PromptEmbedding& prompt,
                          const NeuronMask& mask, const Ablation* ablation, ActivationMap* recorder) {
    const ModelConfig& cfg = model.config;
    if (x_t.channels != cfg.image_channels || x_t.height != cfg.image_size || x_t.width != cfg.image_size)
        throw ShapeError("predict_noise: image shape does not match model resolution");
    if (prompt.embedded.rows() != cfg.prompt_length || prompt.embedded.cols() != cfg.text_width)
        throw ShapeError("predict_noise: prompt embedding shape does not match model");
    ForwardTrace tr;
    Matrix eps = run_forward(model, x_t.data, timestep, prompt.embedded, prompt.length, value_scales(model, mask),
                             ablation, recorder, tr);
    return LatentImage(x_t.channels, x_t.height, x_t.width, std::move(eps));
}

ActivationMap record_activations(const DenoiserModel& model, const PromptEmbedding& prompt) {
    const ModelConfig& cfg = model.config;
    ActivationMap act;
    const int n = recorded_tokens(cfg, prompt.length);
    for (const auto& bw : model.weights.blocks) {
        const Matrix v = prompt.embedded * bw.attn.w_v;
        act.layers.push_back(v.topRows(n).cwiseAbs().colwise().mean().transpose());
    }
    return act;
}

double loss_and_gradient(const DenoiserModel& model, const TrainingExample& example, Weights& grad, double weight) {
    const PromptEmbedding prompt = model.embed(example.tokens);
    ForwardTrace tr;
    const std::vector<Vector> scales = value_scales(model, {});
    const LatentImage x_t = add_noise(example.x0, example.noise, example.timestep, model.schedule);
    const Matrix eps = run_forward(model, x_t.data, model.schedule.model_timestep[example.timestep], prompt.embedded,
                                   prompt.length, scales, nullptr, nullptr, tr);
    const Matrix diff = eps - example.noise.data;
    const double n = static_cast<double>(diff.size());
    const double loss = diff.squaredNorm() / n;
    const Matrix deps = (2.0 * weight / n) * diff;
    const Matrix dtext = run_backward(model, tr, deps, grad);
    for (int i = 0; i < model.config.prompt_length; ++i) grad.token_embedding.row(prompt.tokens[i]) += dtext.row(i);
    return loss;
}

double value_sparsity_penalty(const DenoiserModel& model, const std::vector<int>& tokens, Weights* grad,
                              double weight) {
    const PromptEmbedding prompt = model.embed(tokens);
    const int n = recorded_tokens(model.config, prompt.length);
    const Matrix text = prompt.embedded.topRows(n);
    Matrix dtext = Matrix::Zero(n, model.config.text_width);
    double penalty = 0.0;
    for (std::size_t b = 0; b < model.weights.blocks.size(); ++b) {
        const Matrix& w_v = model.weights.blocks[b].attn.w_v;
        const Matrix v = text * w_v;
        const double count = static_cast<double>(v.size());
        penalty += v.cwiseAbs().sum() / count;
        if (grad) {
            const Matrix dv = v.unaryExpr([](double x) { return static_cast<double>((x > 0) - (x < 0)); }) *
                              (weight / count);
            grad->blocks[b].attn.w_v.noalias() += text.transpose() * dv;
            dtext.noalias() += dv * w_v.transpose();
        }
    }
    if (grad)
        for (int i = 0; i < n; ++i) grad->token_embedding.row(prompt.tokens[i]) += dtext.row(i);
    return penalty;
}

double example_loss(const DenoiserModel& model, const TrainingExample& example) {
    const PromptEmbedding prompt = model.embed(example.tokens);
    const LatentImage x_t = add_noise(example.x0, example.noise, example.timestep, model.schedule);
    const LatentImage eps = predict_noise(model, x_t, model.schedule.model_timestep[example.timestep], prompt);
    return (eps.data - example.noise.data).squaredNorm() / static_cast<double>(eps.data.size());
}

}  // namespace nemo
