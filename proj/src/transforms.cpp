#include "ctxpatch/transforms.hpp"

namespace ctxpatch {
using nlohmann::json;

void TransformConfig::validate() const {
  if (!(scale_min > 0) || scale_min > scale_max) throw InvalidArgument("transform scale_range must be ordered and positive");
  if (rotation_deg < 0 || brightness < 0 || noise_sigma < 0)
    throw InvalidArgument("transform rotation/brightness/noise ranges must be non-negative");
  if (!(contrast_min > 0) || contrast_min > contrast_max) throw InvalidArgument("transform contrast_range must be ordered and positive");
}

json to_json(const TransformConfig& c) {
  return {{"scale_range", {c.scale_min, c.scale_max}},
          {"rotation_range", c.rotation_deg},
          {"brightness_range", c.brightness},
          {"contrast_range", {c.contrast_min, c.contrast_max}},
          {"noise_sigma", c.noise_sigma},
          {"enabled",
           {{"scale", c.scale_enabled},
            {"rotation", c.rotation_enabled},
            {"brightness", c.brightness_enabled},
            {"contrast", c.contrast_enabled},
            {"noise", c.noise_enabled}}},
          {"scope", c.scope == TransformScope::Scene ? "scene" : "patch"},
          {"seed", c.seed}};
}

TransformConfig transform_config_from_json(const json& j) {
  TransformConfig c;
  if (j.contains("scale_range")) {
    c.scale_min = j.at("scale_range").at(0).get<double>();
    c.scale_max = j.at("scale_range").at(1).get<double>();
  }
  c.rotation_deg = j.value("rotation_range", c.rotation_deg);
  c.brightness = j.value("brightness_range", c.brightness);
  if (j.contains("contrast_range")) {
    c.contrast_min = j.at("contrast_range").at(0).get<double>();
    c.contrast_max = j.at("contrast_range").at(1).get<double>();
  }
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  if (j.contains("enabled")) {
    const auto& e = j.at("enabled");
    c.scale_enabled = e.value("scale", c.scale_enabled);
    c.rotation_enabled = e.value("rotation", c.rotation_enabled);
    c.brightness_enabled = e.value("brightness", c.brightness_enabled);
    c.contrast_enabled = e.value("contrast", c.contrast_enabled);
    c.noise_enabled = e.value("noise", c.noise_enabled);
  }
  if (j.contains("scope")) {
    const auto s = j.at("scope").get<std::string>();
    if (s == "scene") c.scope = TransformScope::Scene;
    else if (s == "patch") c.scope = TransformScope::Patch;
    else throw InvalidArgument("transform scope must be 'scene' or 'patch'");
  }
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

json to_json(const Transform& t) {
  return {{"scale", t.scale}, {"rotation_deg", t.rotation_deg}, {"brightness", t.brightness},
          {"contrast", t.contrast}, {"noise_sigma", t.noise_sigma}, {"noise_seed", t.noise_seed}};
}

}  // namespace ctxpatch
