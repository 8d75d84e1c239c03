#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include <nlohmann/json.hpp>

#include "flowforge/denoiser.hpp"
#include "flowforge/diffusion.hpp"

namespace flowforge {

// VFCK layout, little-endian:
//   "VFCK" | u32 version | u32 header_len | header JSON (header_len bytes)
//   | float32 params | float32 adam m | float32 adam v   (moments only if present)
// The header holds the net and schedule configs, the named-tensor index and
// free-form training metadata.
inline constexpr char kCheckpointMagic[4] = {'V', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ScheduleConfig schedule;
    DenoiserParams<float> params;
    std::optional<OptimizerState<float>> optimizer;
    nlohmann::json meta = nlohmann::json::object();  // epoch, train config, dataset scale, ...
};

/// Writes to a temporary file and renames it over `path`, so a crash never
/// leaves a half-written checkpoint behind.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws FormatError (bad magic, truncated, version mismatch, malformed header).
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace flowforge
