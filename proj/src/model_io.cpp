#include "nemo/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace nemo {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'N', 'E', 'M', 'O', 'W', 'T', 'S', '\0'};

std::string spacing_name(BetaSpacing s) { return s == BetaSpacing::linear ? "linear" : "scaled_linear"; }

BetaSpacing spacing_from(const std::string& s) {
    if (s == "linear") return BetaSpacing::linear;
    if (s == "scaled_linear") return BetaSpacing::scaled_linear;
    throw FormatError("unknown beta spacing '" + s + "'");
}

template <class T>
void put(std::vector<char>& out, T value) {
    const char* p = reinterpret_cast<const char*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::vector<char>& buf) : buf_(buf) {}

    template <class T>
    T get() {
        T value;
        need(sizeof(T));
        std::memcpy(&value, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }
    const char* take(std::size_t n) {
        need(n);
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) throw FormatError("model file truncated");
    }
    const std::vector<char>& buf_;
    std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, value >>= 4) s[i] = digits[value & 0xf];
    return s;
}

nlohmann::json config_to_json(const ModelConfig& c) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : c.blocks) blocks.push_back({{"value_width", b.value_width}, {"downsample", b.downsample}});
    return {{"profile", c.profile},
            {"image_channels", c.image_channels},
            {"image_size", c.image_size},
            {"channels", c.channels},
            {"groups", c.groups},
            {"vocab", c.vocab},
            {"prompt_length", c.prompt_length},
            {"pad_token", c.pad_token},
            {"text_width", c.text_width},
            {"time_width", c.time_width},
            {"time_hidden", c.time_hidden},
            {"output_skip", c.output_skip},
            {"activations_include_padding", c.activations_include_padding},
            {"blocks", blocks},
            {"diffusion_steps", c.diffusion_steps},
            {"beta_start", c.beta_start},
            {"beta_end", c.beta_end},
            {"beta_spacing", spacing_name(c.spacing)}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.profile = j.at("profile").get<std::string>();
        c.image_channels = j.at("image_channels").get<int>();
        c.image_size = j.at("image_size").get<int>();
        c.channels = j.at("channels").get<int>();
        c.groups = j.at("groups").get<int>();
        c.vocab = j.at("vocab").get<int>();
        c.prompt_length = j.at("prompt_length").get<int>();
        c.pad_token = j.at("pad_token").get<int>();
        c.text_width = j.at("text_width").get<int>();
        c.time_width = j.at("time_width").get<int>();
        c.time_hidden = j.at("time_hidden").get<int>();
        c.output_skip = j.at("output_skip").get<bool>();
        c.activations_include_padding = j.at("activations_include_padding").get<bool>();
        c.blocks.clear();
        for (const auto& b : j.at("blocks"))
            c.blocks.push_back({b.at("value_width").get<int>(), b.at("downsample").get<bool>()});
        c.diffusion_steps = j.at("diffusion_steps").get<int>();
        c.beta_start = j.at("beta_start").get<double>();
        c.beta_end = j.at("beta_end").get<double>();
        c.spacing = spacing_from(j.at("beta_spacing").get<std::string>());
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad architecture descriptor: ") + e.what());
    } catch (const DomainError& e) {
        throw FormatError(std::string("bad architecture descriptor: ") + e.what());
    }
}

void save_model(const DenoiserModel& model, const std::filesystem::path& path) {
    nlohmann::json tensors = nlohmann::json::array();
    model.weights.visit([&](const std::string& name, const Matrix& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    });
    const std::string descriptor = nlohmann::json{{"config", config_to_json(model.config)}, {"tensors", tensors}}.dump();

    std::vector<char> out(kMagic, kMagic + sizeof(kMagic));
    put<std::uint32_t>(out, kModelFormatVersion);
    put<std::uint64_t>(out, descriptor.size());
    out.insert(out.end(), descriptor.begin(), descriptor.end());
    const std::size_t payload_start = out.size();
    model.weights.visit([&](const std::string&, const Matrix& m) {
        const char* p = reinterpret_cast<const char*>(m.data());
        out.insert(out.end(), p, p + m.size() * sizeof(double));
    });
    put<std::uint64_t>(out, fnv1a(out.data() + payload_start, out.size() - payload_start));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

DenoiserModel load_model(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open model file '" + path.string() + "'");
    const std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader in(buf);

    if (std::memcmp(in.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0)
        throw FormatError("not a model file (bad magic)");
    const auto version = in.get<std::uint32_t>();
    if (version != kModelFormatVersion)
        throw VersionError("model format version " + std::to_string(version) + " unsupported (expected " +
                           std::to_string(kModelFormatVersion) + ")");
    const auto desc_len = in.get<std::uint64_t>();
    if (desc_len > in.remaining()) throw FormatError("model file truncated");
    const char* desc = in.take(desc_len);

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(desc, desc + desc_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt descriptor: ") + e.what());
    }
    DenoiserModel model = init_model(config_from_json(j.at("config")), 0);

    const auto& tensors = j.at("tensors");
    std::size_t k = 0;
    std::vector<char> payload;
    model.weights.visit([&](const std::string& name, Matrix& m) {
        if (k >= tensors.size() || tensors[k].at("name").get<std::string>() != name ||
            tensors[k].at("rows").get<Eigen::Index>() != m.rows() ||
            tensors[k].at("cols").get<Eigen::Index>() != m.cols())
            throw FormatError("tensor registry does not match architecture at '" + name + "'");
        const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(double);
        const char* p = in.take(bytes);
        std::memcpy(m.data(), p, bytes);
        payload.insert(payload.end(), p, p + bytes);
        ++k;
    });
    if (k != tensors.size()) throw FormatError("tensor registry has extra entries");
    const auto checksum = in.get<std::uint64_t>();
    if (checksum != fnv1a(payload.data(), payload.size())) throw FormatError("model file checksum mismatch");
    if (in.remaining() != 0) throw FormatError("trailing bytes after model payload");
    return model;
}

std::string model_hash(const DenoiserModel& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    model.weights.visit([&](const std::string&, const Matrix& m) {
        h = fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
    });
    return hex64(h);
}

}  // namespace nemo
