#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctxpatch/image.hpp"
#include "json.hpp"

namespace ctxpatch {

enum class BackgroundTexture { Flat, Noise, Tiled, Mixed };

struct SynthConfig {
  int image_size = 256;
  int targets_min = 1;
  int targets_max = 3;
  int size_min = 24;  // plane length in pixels
  int size_max = 44;
  BackgroundTexture texture = BackgroundTexture::Mixed;
  int min_gap = 6;    // free pixels between target bboxes
  int margin = 8;     // free pixels between a bbox and the image border
  int max_retries = 200;
  double context_scale = 1.8;  // written into each annotation
  std::uint64_t seed = 0;

  void validate() const;
};

/// Plane-like targets never take values below this; backgrounds stay below `kBackgroundMax`.
inline constexpr float kAlbedoMin = 0.72f;
inline constexpr float kBackgroundMax = 0.6f;

/// Deterministic in (config.seed, index).
Scene generate_scene(const SynthConfig& config, int index);

std::string scene_id_for(int index);

/// Writes images/NNNN.png, masks/NNNN_k.png, annotations/NNNN.json and manifest.json.
void write_dataset(const SynthConfig& config, int count, const std::filesystem::path& directory,
                   int workers = 1);
void write_scenes(const std::vector<Scene>& scenes, const nlohmann::json& manifest,
                  const std::filesystem::path& directory);
std::vector<Scene> read_dataset(const std::filesystem::path& directory);
nlohmann::json read_manifest(const std::filesystem::path& directory);

nlohmann::json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);
std::string to_string(BackgroundTexture t);
BackgroundTexture texture_from_string(const std::string& s);

}  // namespace ctxpatch
