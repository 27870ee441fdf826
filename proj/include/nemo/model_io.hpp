#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "nemo/model.hpp"

namespace nemo {

// Weight file layout (all integers little-endian):
//   8 bytes   magic "NEMOWTS\0"
//   u32       format version
//   u64       descriptor length n
//   n bytes   JSON descriptor: architecture config plus tensor names/shapes
//   ...       float64 tensors in registry order, column-major
//   u64       FNV-1a hash of the tensor bytes
inline constexpr std::uint32_t kModelFormatVersion = 1;

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

void save_model(const DenoiserModel& model, const std::filesystem::path& path);

// Throws VersionError for a foreign format version and FormatError for any
// other malformed or truncated file.
DenoiserModel load_model(const std::filesystem::path& path);

// FNV-1a over the weight bytes, hex encoded. Stable across save/load.
std::string model_hash(const DenoiserModel& model);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace nemo
