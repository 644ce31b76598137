#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctxpatch/attack.hpp"
#include "ctxpatch/detector_train.hpp"
#include "ctxpatch/eval.hpp"
#include "ctxpatch/scene_synth.hpp"
#include "json.hpp"

namespace ctxpatch {

struct DetectorSection {
  std::string proxy = "toy-a";
  std::vector<std::string> others{"toy-b"};
  DetectorRecipe recipe;
};

/// Whole-pipeline configuration. Component seeds are never set directly:
/// resolve() derives them from `seed` through named sub-streams.
struct RunConfig {
  std::uint64_t seed = 0;
  SynthConfig synth;
  int train_scenes = 200;
  int heldout_scenes = 50;
  DetectorSection detector;
  AttackConfig attack;
  EvalConfig eval;
  std::string out = "out";

  void resolve();
  std::uint64_t detector_seed(const std::string& name) const;
  std::uint64_t heldout_seed() const;
};

nlohmann::json to_json(const RunConfig& c);

/// Parses a config document over the defaults. Unknown keys and type errors
/// throw ConfigError carrying the JSON path of the offending value.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies a dotted override such as "attack.lambda=0.001" to a config
/// document; the value is parsed as JSON and falls back to a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Hex FNV-1a hash of the canonical dump of the resolved config.
std::string config_hash(const RunConfig& c);

}  // namespace ctxpatch
