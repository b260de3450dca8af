#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "baaf/parameter_store.hpp"
#include "json.hpp"

namespace baaf {

// Checkpoint = <dir>/checkpoint.json (manifest) + <dir>/params.bin (payload).
// The payload is every parameter, in manifest order, as 32-bit IEEE-754
// floats in little-endian byte order with no padding. Each manifest entry
// records its byte offset into the payload.

inline constexpr const char* kCheckpointManifest = "checkpoint.json";
inline constexpr const char* kCheckpointPayload = "params.bin";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void save_checkpoint(const ParameterStore<float>& store, const std::filesystem::path& dir,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "baaf-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["payload"] = kCheckpointPayload;
  manifest["meta"] = meta;
  auto& entries = manifest["parameters"] = nlohmann::json::array();

  std::ofstream bin(dir / kCheckpointPayload, std::ios::binary);
  if (!bin) throw CheckpointError("cannot write " + (dir / kCheckpointPayload).string());
  std::uint64_t offset = 0;
  for (const auto& [path, p] : store) {
    entries.push_back({{"path", path},
                       {"shape", p.value.shape()},
                       {"offset", offset},
                       {"count", p.value.size()},
                       {"trainable", p.trainable}});
    for (float v : p.value.storage()) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      const char bytes[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                             static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
      bin.write(bytes, 4);
    }
    offset += 4 * p.value.size();
  }
  manifest["payload_bytes"] = offset;
  if (!bin) throw CheckpointError("short write to " + (dir / kCheckpointPayload).string());
  std::ofstream js(dir / kCheckpointManifest);
  js << manifest.dump(2) << '\n';
  if (!js) throw CheckpointError("cannot write " + (dir / kCheckpointManifest).string());
}

inline ParameterStore<float> load_checkpoint(const std::filesystem::path& dir, nlohmann::json* meta = nullptr) {
  std::ifstream js(dir / kCheckpointManifest);
  if (!js) throw CheckpointError("missing checkpoint manifest " + (dir / kCheckpointManifest).string());
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "baaf-checkpoint" || manifest.value("dtype", "") != "float32")
    throw CheckpointError("unsupported checkpoint format in " + dir.string());

  std::ifstream bin(dir / manifest.value("payload", std::string(kCheckpointPayload)), std::ios::binary);
  if (!bin) throw CheckpointError("missing checkpoint payload in " + dir.string());
  std::string payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  ParameterStore<float> store;
  for (const auto& e : manifest.at("parameters")) {
    const Shape shape = e.at("shape").get<Shape>();
    const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    const std::size_t count = shape_numel(shape);
    if (offset + 4 * count > payload.size())
      throw CheckpointError("checkpoint payload truncated at parameter " + e.at("path").get<std::string>());
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      const auto* b = reinterpret_cast<const unsigned char*>(payload.data() + offset + 4 * i);
      const std::uint32_t u = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
                              (std::uint32_t(b[3]) << 24);
      data[i] = std::bit_cast<float>(u);
    }
    store.add(e.at("path").get<std::string>(), Tensor<float>(shape, std::move(data)), e.value("trainable", true));
  }
  if (meta) *meta = manifest.value("meta", nlohmann::json::object());
  return store;
}

}  // namespace baaf
