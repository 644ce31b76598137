#include "ctxpatch/scene_synth.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ctxpatch/parallel.hpp"
#include "ctxpatch/png_io.hpp"
#include "ctxpatch/rng.hpp"

namespace ctxpatch {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Vec2 {
  double x, y;
};
using Quad = std::array<Vec2, 4>;

bool inside_convex(const Quad& q, Vec2 p) {
  int sign = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const Vec2 a = q[i], b = q[(i + 1) % q.size()];
    const double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    const int s = cross > 0 ? 1 : (cross < 0 ? -1 : 0);
    if (s == 0) continue;
    if (sign == 0) sign = s;
    else if (s != sign) return false;
  }
  return true;
}

// Fuselage, two wings and two tail fins in units of the plane length; nose along +x.
std::vector<Quad> plane_parts(double sweep, double span, double tail_span) {
  std::vector<Quad> parts;
  parts.push_back({{{-0.5, -0.05}, {0.5, -0.03}, {0.5, 0.03}, {-0.5, 0.05}}});
  for (double side : {1.0, -1.0}) {
    parts.push_back({{{0.12, 0.0}, {-0.10, 0.0}, {-0.10 - sweep, side * span}, {0.0 - sweep, side * span}}});
    parts.push_back({{{-0.36, 0.0}, {-0.48, 0.0}, {-0.50, side * tail_span}, {-0.44, side * tail_span}}});
  }
  return parts;
}

double smooth(double t) { return t * t * (3 - 2 * t); }

Eigen::ArrayXXd value_noise(Rng& rng, int size, int period) {
  const int cells = size / period + 2;
  Eigen::ArrayXXd lattice(cells, cells);
  for (int i = 0; i < cells; ++i)
    for (int j = 0; j < cells; ++j) lattice(i, j) = uniform(rng, 0.0, 1.0);
  Eigen::ArrayXXd out(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const double u = double(c) / period, v = double(r) / period;
      const int i = int(v), j = int(u);
      const double a = smooth(u - j), b = smooth(v - i);
      out(r, c) = (1 - b) * ((1 - a) * lattice(i, j) + a * lattice(i, j + 1)) +
                  b * ((1 - a) * lattice(i + 1, j) + a * lattice(i + 1, j + 1));
    }
  return out;
}

Image<float> make_background(Rng& rng, BackgroundTexture texture, int size) {
  if (texture == BackgroundTexture::Mixed) texture = BackgroundTexture(uniform_int(rng, 0, 2));
  const std::array<double, 3> base = {uniform(rng, 0.18, 0.42), uniform(rng, 0.2, 0.45), uniform(rng, 0.15, 0.38)};
  Eigen::ArrayXXd field = Eigen::ArrayXXd::Zero(size, size);
  switch (texture) {
    case BackgroundTexture::Flat:
      break;
    case BackgroundTexture::Noise: {
      double amp = 0.16;
      for (int period : {48, 16, 6}) {
        field += amp * (value_noise(rng, size, period) - 0.5);
        amp *= 0.5;
      }
      break;
    }
    case BackgroundTexture::Tiled: {
      const int px = uniform_int(rng, 28, 64), py = uniform_int(rng, 28, 64);
      const int cols = size / px + 1, rows = size / py + 1;
      Eigen::ArrayXXd tile(rows, cols);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) tile(i, j) = uniform(rng, -0.08, 0.08);
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
          const bool line = (r % py) < 2 || (c % px) < 2;
          field(r, c) = line ? -0.1 : tile(r / py, c / px);
        }
      break;
    }
    case BackgroundTexture::Mixed:
      break;
  }
  Image<float> img(size, size);
  std::normal_distribution<double> grain(0.0, 0.01);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const double g = grain(rng);
      for (int ch = 0; ch < 3; ++ch)
        img(r, c, ch) = float(std::clamp(base[std::size_t(ch)] + field(r, c) + g, 0.05, double(kBackgroundMax)));
    }
  return img;
}

bool boxes_conflict(const BoundingBox& a, const BoundingBox& b, double gap) {
  return a.x_min < b.x_max + gap && b.x_min < a.x_max + gap && a.y_min < b.y_max + gap && b.y_min < a.y_max + gap;
}

}  // namespace

void SynthConfig::validate() const {
  if (image_size < 32) throw InvalidArgument("image_size must be >= 32");
  if (targets_min < 1 || targets_max < targets_min)
    throw InvalidArgument("targets_per_scene must be a range with at least one target");
  if (size_min < 4 || size_max < size_min) throw InvalidArgument("target_size range is invalid");
  if (size_max >= image_size) throw InvalidArgument("target_size must be smaller than image_size");
  if (min_gap < 0 || margin < 0 || max_retries < 1) throw InvalidArgument("placement parameters are invalid");
  if (!(context_scale >= 1.0)) throw InvalidArgument("context_scale must be >= 1");
}

std::string scene_id_for(int index) {
  std::ostringstream os;
  os.width(4);
  os.fill('0');
  os << index;
  return os.str();
}

Scene generate_scene(const SynthConfig& config, int index) {
  config.validate();
  Rng rng = make_rng(config.seed, "synth", std::uint64_t(index));
  const int size = config.image_size;
  Scene scene;
  scene.scene_id = scene_id_for(index);
  scene.image = make_background(rng, config.texture, size);

  const int count = uniform_int(rng, config.targets_min, config.targets_max);
  for (int k = 0; k < count; ++k) {
    const double length = uniform(rng, config.size_min, config.size_max);
    const double angle = uniform(rng, 0.0, 2 * std::numbers::pi);
    const auto parts = plane_parts(uniform(rng, 0.06, 0.16), uniform(rng, 0.40, 0.50), uniform(rng, 0.14, 0.2));
    std::array<float, 3> albedo;
    const double lum = uniform(rng, 0.78, 0.95);
    for (auto& a : albedo) a = float(std::clamp(lum + uniform(rng, -0.04, 0.04), double(kAlbedoMin), 1.0));
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double reach = 0.75 * length;

    bool placed = false;
    for (int attempt = 0; attempt < config.max_retries && !placed; ++attempt) {
      const double cx = uniform(rng, config.margin + reach, size - config.margin - reach);
      const double cy = uniform(rng, config.margin + reach, size - config.margin - reach);
      Mask<float> mask(size, size);
      const int r0 = std::max(0, int(cy - reach)), r1 = std::min(size - 1, int(cy + reach) + 1);
      const int c0 = std::max(0, int(cx - reach)), c1 = std::min(size - 1, int(cx + reach) + 1);
      for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
          const double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
          const Vec2 local{(ca * dx + sa * dy) / length, (-sa * dx + ca * dy) / length};
          for (const auto& q : parts)
            if (inside_convex(q, local)) {
              mask(r, c) = 1.0f;
              break;
            }
        }
      BoundingBox box;
      if (!mask_bbox(mask, box)) continue;
      const BoundingBox inner{double(config.margin), double(config.margin), double(size - config.margin),
                              double(size - config.margin)};
      if (box.x_min < inner.x_min || box.y_min < inner.y_min || box.x_max > inner.x_max || box.y_max > inner.y_max)
        continue;
      bool clash = false;
      for (const auto& t : scene.targets) clash = clash || boxes_conflict(box, t.bbox, config.min_gap);
      if (clash) continue;
      for (Index p = 0; p < mask.pixels(); ++p)
        if (mask.data()(p) > 0)
          for (Index ch = 0; ch < 3; ++ch) scene.image.data()(ch, p) = albedo[std::size_t(ch)];
      scene.targets.push_back({box, std::move(mask), config.context_scale});
      placed = true;
    }
    if (!placed)
      throw PlacementError("scene " + scene.scene_id + ": could not place target " + std::to_string(k) +
                           " without overlap after " + std::to_string(config.max_retries) + " retries");
  }
  return scene;
}

void validate_scene(const Scene& scene) {
  if (scene.targets.empty()) throw InvalidArgument("scene " + scene.scene_id + " has no targets");
  for (const auto& t : scene.targets) {
    if (!t.bbox.valid() || !t.bbox.within(scene.image.dims()))
      throw BoundsError("scene " + scene.scene_id + ": target bbox outside image");
    if (t.fg_mask.dims() != scene.image.dims()) throw DimensionError("scene " + scene.scene_id + ": mask dims");
  }
}

std::string to_string(BackgroundTexture t) {
  switch (t) {
    case BackgroundTexture::Flat: return "flat";
    case BackgroundTexture::Noise: return "noise";
    case BackgroundTexture::Tiled: return "tiled";
    case BackgroundTexture::Mixed: return "mixed";
  }
  return "mixed";
}

BackgroundTexture texture_from_string(const std::string& s) {
  if (s == "flat") return BackgroundTexture::Flat;
  if (s == "noise") return BackgroundTexture::Noise;
  if (s == "tiled") return BackgroundTexture::Tiled;
  if (s == "mixed") return BackgroundTexture::Mixed;
  throw InvalidArgument("unknown background_texture '" + s + "'");
}

json to_json(const SynthConfig& c) {
  return {{"image_size", c.image_size},
          {"targets_per_scene", {c.targets_min, c.targets_max}},
          {"target_size", {c.size_min, c.size_max}},
          {"background_texture", to_string(c.texture)},
          {"min_gap", c.min_gap},
          {"margin", c.margin},
          {"max_retries", c.max_retries},
          {"context_scale", c.context_scale},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  c.image_size = j.value("image_size", c.image_size);
  if (j.contains("targets_per_scene")) {
    c.targets_min = j.at("targets_per_scene").at(0).get<int>();
    c.targets_max = j.at("targets_per_scene").at(1).get<int>();
  }
  if (j.contains("target_size")) {
    c.size_min = j.at("target_size").at(0).get<int>();
    c.size_max = j.at("target_size").at(1).get<int>();
  }
  if (j.contains("background_texture")) c.texture = texture_from_string(j.at("background_texture").get<std::string>());
  c.min_gap = j.value("min_gap", c.min_gap);
  c.margin = j.value("margin", c.margin);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.context_scale = j.value("context_scale", c.context_scale);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing file " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace

void write_scenes(const std::vector<Scene>& scenes, const json& manifest, const fs::path& directory) {
  std::error_code ec;
  for (const char* sub : {"images", "masks", "annotations"}) fs::create_directories(directory / sub, ec);
  if (ec) throw IoError("cannot create dataset directory " + directory.string() + ": " + ec.message());
  for (const auto& s : scenes) {
    json ann = {{"scene_id", s.scene_id},
                {"image", "images/" + s.scene_id + ".png"},
                {"height", s.image.height()},
                {"width", s.image.width()},
                {"targets", json::array()}};
    write_png(directory / "images" / (s.scene_id + ".png"), s.image);
    for (std::size_t k = 0; k < s.targets.size(); ++k) {
      const auto& t = s.targets[k];
      const std::string mask_rel = "masks/" + s.scene_id + "_" + std::to_string(k) + ".png";
      write_mask_png(directory / mask_rel, t.fg_mask);
      ann["targets"].push_back({{"bbox", {t.bbox.x_min, t.bbox.y_min, t.bbox.x_max, t.bbox.y_max}},
                                {"mask", mask_rel},
                                {"context_scale", t.context_scale}});
    }
    write_json(directory / "annotations" / (s.scene_id + ".json"), ann);
  }
  write_json(directory / "manifest.json", manifest);
}

void write_dataset(const SynthConfig& config, int count, const fs::path& directory, int workers) {
  if (count < 1) throw InvalidArgument("dataset count must be >= 1");
  std::vector<Scene> scenes(static_cast<std::size_t>(count));
  parallel_for(scenes.size(), workers, [&](std::size_t i) { scenes[i] = generate_scene(config, int(i)); });
  write_scenes(scenes, {{"schema_version", 1}, {"count", count}, {"synth", to_json(config)}}, directory);
}

json read_manifest(const fs::path& directory) { return read_json(directory / "manifest.json"); }

std::vector<Scene> read_dataset(const fs::path& directory) {
  const json manifest = read_manifest(directory);
  int count = 0;
  try {
    count = manifest.at("count").get<int>();
  } catch (const json::exception& e) {
    throw IoError("manifest.json in " + directory.string() + " lacks an integer 'count': " + e.what());
  }
  std::vector<Scene> scenes;
  scenes.reserve(std::size_t(count));
  for (int i = 0; i < count; ++i) {
    const fs::path ann_path = directory / "annotations" / (scene_id_for(i) + ".json");
    const json ann = read_json(ann_path);
    Scene s;
    try {
      s.scene_id = ann.at("scene_id").get<std::string>();
      s.image = read_png(directory / ann.at("image").get<std::string>());
      for (const auto& t : ann.at("targets")) {
        const auto& b = t.at("bbox");
        TargetRegion region;
        region.bbox = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
        const fs::path mask_path = directory / t.at("mask").get<std::string>();
        if (!fs::exists(mask_path)) throw IoError(ann_path.string() + ": mask file not found: " + mask_path.string());
        region.fg_mask = read_mask_png(mask_path).binarized();
        region.context_scale = t.value("context_scale", 1.8);
        s.targets.push_back(std::move(region));
      }
    } catch (const json::exception& e) {
      throw IoError("malformed annotation " + ann_path.string() + ": " + e.what());
    }
    validate_scene(s);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace ctxpatch
