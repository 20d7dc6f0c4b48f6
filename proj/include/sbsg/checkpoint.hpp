#pragma once

#include <filesystem>

#include "sbsg/model.hpp"

namespace sbsg {

inline constexpr const char* kCheckpointMagic = "SBSG1";

/// Checkpoint layout:
///   "SBSG1\n", then `key=value` lines for every ModelConfig field and
///   `tensors=N`, terminated by a line "end". N binary records follow, each
///   u32 name length, name bytes, u32 rank, u64 dims, then row-major
///   little-endian f64 values.
struct Checkpoint {
  ModelConfig config;
  Params params;
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const Params& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sbsg
