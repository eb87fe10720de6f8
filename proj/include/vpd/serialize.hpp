#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vpd/synth.hpp"
#include "vpd/tensor.hpp"
#include "vpd/unet.hpp"

namespace vpd {

// Binary volume container: magic "VPDVOL1", dtype code byte (0 = float32),
// four u32 little-endian extents, then the C-order 32-bit payload.
void write_volume_file(const std::string& path, const Tensorf& t);
Tensorf read_volume_file(const std::string& path);

// Model checkpoint: magic "VPDCKPT1", a JSON header (config + extras), then
// named parameter tensors with shapes and 32-bit little-endian payloads.
struct Checkpoint {
  UNetConfig config;
  std::vector<std::pair<std::string, Tensorf>> params;
  nlohmann::json extra;
};

void write_checkpoint(const std::string& path, const UNetConfig& cfg,
                      const std::vector<std::pair<std::string, Tensorf>>& params,
                      const nlohmann::json& extra = nlohmann::json::object());
Checkpoint read_checkpoint(const std::string& path);

nlohmann::json unet_config_to_json(const UNetConfig& cfg);
UNetConfig unet_config_from_json(const nlohmann::json& j);
nlohmann::json scene_config_to_json(const SceneConfig& cfg);
SceneConfig scene_config_from_json(const nlohmann::json& j);

// Dataset manifest: scene config, its hash, and the sample seeds. Sample
// volumes live beside the manifest under scene_<seed>_*.vpdvol.
struct DatasetManifest {
  SceneConfig scene;
  std::vector<uint64_t> seeds;
  std::string config_hash;
};

std::string scene_config_hash(const SceneConfig& cfg);
void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

// On-disk scene samples (one VolumeFile per part).
void write_scene_sample(const std::string& dir, const SceneSample& s);
SceneSample read_scene_sample(const std::string& dir, const SceneConfig& cfg, uint64_t seed);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace vpd
