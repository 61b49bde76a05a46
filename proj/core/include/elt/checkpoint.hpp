#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "elt/model.hpp"

namespace elt {

inline constexpr const char* kCheckpointFormat = "elt-ckpt-v1";

// On-disk layout: one line of JSON manifest terminated by '\n', followed by a
// single blob of little-endian IEEE-754 float64 arrays. The manifest records
// the model config, free-form metadata and, per tensor, its name, shape,
// dtype ("f64"), byte offset into the blob and byte length.
struct Checkpoint {
  BlockParams params;
  nlohmann::json meta;
};

std::string serialize_checkpoint(const BlockParams& params, const nlohmann::json& meta = {});
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const BlockParams& params,
                     const nlohmann::json& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace elt
