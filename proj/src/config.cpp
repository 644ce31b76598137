#include "ctxpatch/config.hpp"

#include <cstdio>
#include <fstream>

namespace ctxpatch {
using nlohmann::json;

void RunConfig::resolve() {
  synth.seed = derive_seed(seed, "synth");
  attack.seed = derive_seed(seed, "attack");
  attack.transform.seed = derive_seed(seed, "transforms");
  eval.seed = derive_seed(seed, "eval");
  eval.render_transform.seed = derive_seed(seed, "eval/transforms");
  detector.recipe.augmentation.seed = derive_seed(seed, "detector/augment");
}

std::uint64_t RunConfig::detector_seed(const std::string& name) const { return derive_seed(seed, "detector/" + name); }

std::uint64_t RunConfig::heldout_seed() const { return derive_seed(seed, "synth/heldout"); }

namespace {

void strip_seeds(json& j) {
  if (!j.is_object()) return;
  j.erase("seed");
  for (auto& [k, v] : j.items()) strip_seeds(v);
}

json recipe_json(const DetectorRecipe& r) {
  return {{"epochs", r.epochs},
          {"batch_size", r.batch_size},
          {"learning_rate", r.learning_rate},
          {"final_lr_fraction", r.final_lr_fraction},
          {"box_weight", r.box_weight},
          {"augment", r.augment},
          {"augment_prob", r.augment_prob},
          {"augmentation", to_json(r.augmentation)},
          {"clutter_prob", r.clutter_prob},
          {"clutter_scale", {r.clutter_scale_min, r.clutter_scale_max}},
          {"min_scenes", r.min_scenes},
          {"gate", r.gate},
          {"conf_threshold", r.conf_threshold},
          {"nms_iou", r.nms_iou},
          {"iou_min", r.iou_min}};
}

DetectorRecipe recipe_from_json(const json& j) {
  DetectorRecipe r;
  r.epochs = j.at("epochs").get<int>();
  r.batch_size = j.at("batch_size").get<int>();
  r.learning_rate = j.at("learning_rate").get<double>();
  r.final_lr_fraction = j.at("final_lr_fraction").get<double>();
  r.box_weight = j.at("box_weight").get<double>();
  r.augment = j.at("augment").get<bool>();
  r.augment_prob = j.at("augment_prob").get<double>();
  r.augmentation = transform_config_from_json(j.at("augmentation"));
  r.clutter_prob = j.at("clutter_prob").get<double>();
  r.clutter_scale_min = j.at("clutter_scale").at(0).get<double>();
  r.clutter_scale_max = j.at("clutter_scale").at(1).get<double>();
  r.min_scenes = j.at("min_scenes").get<int>();
  r.gate = j.at("gate").get<double>();
  r.conf_threshold = j.at("conf_threshold").get<double>();
  r.nms_iou = j.at("nms_iou").get<double>();
  r.iou_min = j.at("iou_min").get<double>();
  return r;
}

std::string type_name(const json& j) {
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  return j.type_name();
}

bool compatible(const json& def, const json& v) {
  if (def.is_number_integer()) return v.is_number_integer() && (def.is_number_unsigned() ? v >= 0 : true);
  if (def.is_number()) return v.is_number();
  if (def.is_array()) return v.is_array();
  return def.type() == v.type();
}

void check_against(const json& user, const json& def, const std::string& path) {
  if (!user.is_object()) throw ConfigError(path.empty() ? "/" : path, "expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string p = path + "/" + key;
    if (!def.contains(key)) throw ConfigError(p, "unknown key");
    const json& d = def.at(key);
    if (d.is_object()) {
      check_against(value, d, p);
      continue;
    }
    if (!compatible(d, value)) throw ConfigError(p, "expected " + type_name(d) + ", got " + type_name(value));
    if (d.is_array() && !d.empty()) {
      if (value.size() != d.size() && d.size() == 2) throw ConfigError(p, "expected 2 elements");
      for (std::size_t i = 0; i < value.size(); ++i)
        if (!compatible(d.at(0), value.at(i)))
          throw ConfigError(p + "/" + std::to_string(i), "expected " + type_name(d.at(0)) + ", got " + type_name(value.at(i)));
    }
  }
}

template <typename F>
auto section(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(path, e.what());
  } catch (const Error& e) {
    throw ConfigError(path, e.what());
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  json synth = to_json(c.synth);
  synth["train_scenes"] = c.train_scenes;
  synth["heldout_scenes"] = c.heldout_scenes;
  json detector = recipe_json(c.detector.recipe);
  detector["proxy"] = c.detector.proxy;
  detector["others"] = c.detector.others;
  json doc = {{"seed", c.seed},
              {"synth", synth},
              {"detector", detector},
              {"attack", to_json(c.attack)},
              {"eval", to_json(c.eval)},
              {"paths", {{"out", c.out}}}};
  const std::uint64_t seed = c.seed;
  strip_seeds(doc);
  doc["seed"] = seed;
  return doc;
}

RunConfig run_config_from_json(const json& user) {
  const json defaults = to_json(RunConfig{});
  check_against(user, defaults, "");
  json doc = defaults;
  doc.merge_patch(user);

  RunConfig c;
  c.seed = doc.at("seed").get<std::uint64_t>();
  section("/synth", [&] {
    c.synth = synth_config_from_json(doc.at("synth"));
    c.synth.validate();
    c.train_scenes = doc.at("synth").at("train_scenes").get<int>();
    c.heldout_scenes = doc.at("synth").at("heldout_scenes").get<int>();
    if (c.train_scenes < 1) throw ConfigError("/synth/train_scenes", "must be >= 1");
    if (c.heldout_scenes < 1) throw ConfigError("/synth/heldout_scenes", "must be >= 1");
    return 0;
  });
  section("/detector", [&] {
    const json& d = doc.at("detector");
    c.detector.recipe = recipe_from_json(d);
    if (c.detector.recipe.epochs < 1) throw ConfigError("/detector/epochs", "must be >= 1");
    c.detector.proxy = d.at("proxy").get<std::string>();
    c.detector.others = d.at("others").get<std::vector<std::string>>();
    if (!DetectorRegistry::instance().contains(c.detector.proxy))
      throw ConfigError("/detector/proxy", "unknown detector '" + c.detector.proxy + "'");
    for (std::size_t i = 0; i < c.detector.others.size(); ++i) {
      const auto& name = c.detector.others[i];
      if (!DetectorRegistry::instance().contains(name) || name == c.detector.proxy)
        throw ConfigError("/detector/others/" + std::to_string(i), "unknown or duplicate detector '" + name + "'");
    }
    return 0;
  });
  section("/attack", [&] {
    c.attack = attack_config_from_json(doc.at("attack"));
    c.attack.validate();
    return 0;
  });
  section("/eval", [&] {
    c.eval = eval_config_from_json(doc.at("eval"));
    c.eval.validate();
    return 0;
  });
  c.out = doc.at("paths").at("out").get<std::string>();
  c.resolve();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("/", "cannot read config file " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("/", "malformed JSON in " + path.string() + ": " + e.what());
  }
  return run_config_from_json(doc);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("/", "override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("/", "empty path segment in override " + key);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("/" + key.substr(0, dot), "cannot set a key below a non-object");
    start = dot + 1;
  }
}

std::string config_hash(const RunConfig& c) {
  json doc = to_json(c);
  doc.erase("paths");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(doc.dump())));
  return buf;
}

}  // namespace ctxpatch
