#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "rafl/model.hpp"

namespace rafl {

// On-disk layout (all integers little-endian):
//   "RAFL" | u32 version | u64 manifest bytes | manifest JSON |
//   float64 payloads in manifest order | u32 CRC-32 of the payload region
// The manifest carries the config, step, free-form training state (RNG and
// optimizer counters) and one {name, group, shape, offset} record per array.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    std::uint64_t step = 0;
    ParameterStore params;
    ParameterStore optimizer;  // e.g. Adam moments, keyed "m/<path>" and "v/<path>"
    nlohmann::json state = nlohmann::json::object();
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Loads and verifies the stored parameters against another config's shapes;
/// a mismatch names the first offending path.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

void check_compatible(const ParameterStore& params, const ModelConfig& config);

/// CRC-32 of a whole file, as 8 lowercase hex digits.
std::string file_crc32_hex(const std::filesystem::path& path);

} // namespace rafl
