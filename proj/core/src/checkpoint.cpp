#include "elt/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "elt/error.hpp"

namespace elt {
namespace {

void put_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string serialize_checkpoint(const BlockParams& params, const nlohmann::json& meta) {
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["config"] = to_json(params.config());
  manifest["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  std::string blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : params.tensors()) {
    const std::size_t offset = blob.size();
    for (double v : t.value.values()) put_f64_le(blob, v);
    entries.push_back({{"name", t.name},
                       {"shape", t.value.shape()},
                       {"dtype", "f64"},
                       {"offset", offset},
                       {"nbytes", blob.size() - offset}});
  }
  manifest["tensors"] = std::move(entries);
  manifest["blob_bytes"] = blob.size();
  std::string out = manifest.dump();
  out.push_back('\n');
  out += blob;
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  const auto newline = bytes.find('\n');
  if (newline == std::string_view::npos) throw IoError("checkpoint: missing manifest line");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw IoError("checkpoint: unsupported format '" + manifest.value("format", "") + "'");
  }
  const std::string_view blob = bytes.substr(newline + 1);
  try {
    if (manifest.at("blob_bytes").get<std::size_t>() != blob.size()) {
      throw IoError("checkpoint: blob is " + std::to_string(blob.size()) + " bytes, manifest says " +
                    manifest.at("blob_bytes").dump());
    }
    const LoopConfig cfg = loop_config_from_json(manifest.at("config"));
    std::vector<NamedTensor> tensors;
    for (const auto& e : manifest.at("tensors")) {
      if (e.at("dtype").get<std::string>() != "f64") throw IoError("checkpoint: unsupported dtype");
      Shape shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (nbytes != shape_numel(shape) * 8 || offset + nbytes > blob.size()) {
        throw IoError("checkpoint: tensor " + e.at("name").get<std::string>() + " out of bounds");
      }
      std::vector<double> data(shape_numel(shape));
      const auto* p = reinterpret_cast<const unsigned char*>(blob.data() + offset);
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = get_f64_le(p + 8 * i);
      tensors.push_back({e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data))});
    }
    return Checkpoint{BlockParams::from_tensors(cfg, std::move(tensors)), manifest.at("meta")};
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const BlockParams& params,
                     const nlohmann::json& meta) {
  const std::string bytes = serialize_checkpoint(params, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace elt
