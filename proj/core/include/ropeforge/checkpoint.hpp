#pragma once

#include <filesystem>
#include <string>

#include "ropeforge/model.hpp"

namespace ropeforge::model {

// Binary layout:
//   "TFCK" | u32 version | u64 header_len | header JSON (config, training
//   metadata, tensor names/shapes) | little-endian f32 data per tensor in
//   header order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint decode_checkpoint(const std::string& bytes);

}  // namespace ropeforge::model
