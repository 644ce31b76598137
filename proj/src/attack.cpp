#include "ctxpatch/attack.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "ctxpatch/png_io.hpp"

namespace ctxpatch {
using nlohmann::json;
namespace fs = std::filesystem;

void AttackConfig::validate() const {
  if (iterations < 1) throw InvalidArgument("attack.iterations must be >= 1");
  if (!(step_size >= 0) || !std::isfinite(step_size)) throw InvalidArgument("attack.step_size must be >= 0");
  if (batch_size < 1) throw InvalidArgument("attack.batch_size must be >= 1");
  if (!(lambda >= 0)) throw InvalidArgument("attack.lambda must be non-negative");
  if (!(context_scale >= 1.0)) throw InvalidArgument("attack.context_scale must be >= 1");
  if (canvas_size < 1) throw InvalidArgument("attack.canvas_size must be >= 1");
  if (checkpoint_every < 0) throw InvalidArgument("attack.checkpoint_every must be >= 0");
  if (early_stop.patience < 0 || early_stop.eval_every < 1) throw InvalidArgument("invalid attack.early_stop");
  transform.validate();
}

std::string to_string(Optimizer o) {
  switch (o) {
    case Optimizer::PlainGradient: return "plain-gradient";
    case Optimizer::Momentum: return "momentum";
    case Optimizer::AdaptiveMoments: return "adaptive-moments";
  }
  return "?";
}

std::string to_string(LossMode m) { return m == LossMode::PostNms ? "post-nms" : "dense"; }

namespace {

Optimizer optimizer_from_string(const std::string& s) {
  for (auto o : {Optimizer::PlainGradient, Optimizer::Momentum, Optimizer::AdaptiveMoments})
    if (to_string(o) == s) return o;
  throw InvalidArgument("unknown optimizer '" + s + "'");
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "post-nms") return LossMode::PostNms;
  if (s == "dense") return LossMode::Dense;
  throw InvalidArgument("unknown loss_mode '" + s + "'");
}

}  // namespace

json to_json(const AttackConfig& c) {
  return {{"iterations", c.iterations},
          {"step_size", c.step_size},
          {"optimizer", to_string(c.optimizer)},
          {"lambda", c.lambda},
          {"batch_size", c.batch_size},
          {"context_scale", c.context_scale},
          {"canvas_size", c.canvas_size},
          {"transform", to_json(c.transform)},
          {"loss_mode", to_string(c.loss_mode)},
          {"conf_threshold", c.conf_threshold},
          {"nms_iou", c.nms_iou},
          {"iou_min", c.iou_min},
          {"checkpoint_every", c.checkpoint_every},
          {"early_stop",
           {{"patience", c.early_stop.patience},
            {"min_delta", c.early_stop.min_delta},
            {"eval_every", c.early_stop.eval_every}}},
          {"seed", c.seed}};
}

AttackConfig attack_config_from_json(const json& j) {
  AttackConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.step_size = j.value("step_size", c.step_size);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  c.lambda = j.value("lambda", c.lambda);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.context_scale = j.value("context_scale", c.context_scale);
  c.canvas_size = j.value("canvas_size", c.canvas_size);
  if (j.contains("transform")) c.transform = transform_config_from_json(j.at("transform"));
  if (j.contains("loss_mode")) c.loss_mode = loss_mode_from_string(j.at("loss_mode").get<std::string>());
  c.conf_threshold = j.value("conf_threshold", c.conf_threshold);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  c.iou_min = j.value("iou_min", c.iou_min);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (j.contains("early_stop")) {
    const auto& e = j.at("early_stop");
    c.early_stop.patience = e.value("patience", c.early_stop.patience);
    c.early_stop.min_delta = e.value("min_delta", c.early_stop.min_delta);
    c.early_stop.eval_every = e.value("eval_every", c.early_stop.eval_every);
  }
  c.seed = j.value("seed", c.seed);
  return c;
}

Image<float> init_canvas(int canvas_size, Rng& rng) {
  if (canvas_size < 1) throw InvalidArgument("canvas_size must be >= 1");
  Image<float> c(canvas_size, canvas_size);
  std::uniform_real_distribution<float> u(0.25f, 0.75f);
  for (Index i = 0; i < c.data().size(); ++i) c.data().data()[i] = u(rng);
  return c;
}

json to_json(const TrainingTrace& t) {
  json steps = json::array();
  for (const auto& s : t.steps)
    steps.push_back({{"iteration", s.iteration},
                     {"loss", to_json(s.loss)},
                     {"tv_exact", s.tv_exact},
                     {"mean_confidence", s.mean_confidence},
                     {"wall_seconds", s.wall_seconds},
                     {"foreground_checked", s.foreground_checked}});
  return {{"steps", steps},
          {"evaluations", t.evaluations},
          {"early_stop_at", t.early_stop_at},
          {"canvas_checksum", t.canvas_checksum}};
}

TrainingTrace trace_from_json(const json& j) {
  TrainingTrace t;
  for (const auto& s : j.at("steps")) {
    TrainingStep st;
    st.iteration = s.at("iteration").get<int>();
    const auto& l = s.at("loss");
    st.loss = {l.at("adv").get<double>(), l.at("tv").get<double>(), l.at("total").get<double>(),
               l.at("lambda").get<double>(), l.at("n_detections").get<int>()};
    st.tv_exact = s.at("tv_exact").get<double>();
    st.mean_confidence = s.at("mean_confidence").get<double>();
    st.wall_seconds = s.at("wall_seconds").get<double>();
    st.foreground_checked = s.value("foreground_checked", 0);
    t.steps.push_back(st);
  }
  t.evaluations = j.value("evaluations", std::vector<double>{});
  t.early_stop_at = j.value("early_stop_at", -1);
  t.canvas_checksum = j.value("canvas_checksum", std::string());
  return t;
}

EarlyStopDecision early_stop(const std::vector<double>& evaluations, int patience, double min_delta) {
  if (patience <= 0) return {};
  double best = 0;
  int since = 0;
  for (std::size_t i = 0; i < evaluations.size(); ++i) {
    if (i == 0 || evaluations[i] < best - min_delta) {
      best = evaluations[i];
      since = 0;
    } else if (++since >= patience) {
      return {true, int(i) + 1};
    }
  }
  return {};
}

std::string canvas_checksum(const Image<float>& canvas) {
  const auto& d = canvas.data();
  const std::uint64_t h = fnv1a64(
      std::string_view(reinterpret_cast<const char*>(d.data()), std::size_t(d.size()) * sizeof(float)));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<BatchItem> sample_batch(const AttackConfig& config, std::size_t scene_count, int iteration) {
  if (scene_count == 0) throw InvalidArgument("empty attack dataset");
  Rng rng = make_rng(config.seed, "attack/batch", std::uint64_t(iteration));
  std::vector<BatchItem> batch(std::size_t(config.batch_size));
  for (auto& b : batch) {
    b.scene = std::size_t(uniform_int(rng, 0, int(scene_count) - 1));
    b.transform = sample_transform(config.transform, rng);
  }
  return batch;
}

namespace {

using Storage = Image<float>::Storage;

struct OptimizerState {
  Storage m, v;
  int step = 0;
};

void optimizer_step(const AttackConfig& cfg, Image<float>& canvas, const Storage& g, OptimizerState& st) {
  ++st.step;
  const float lr = float(cfg.step_size);
  switch (cfg.optimizer) {
    case Optimizer::PlainGradient:
      canvas.data() -= lr * g;
      break;
    case Optimizer::Momentum:
      st.m = 0.9f * st.m + g;
      canvas.data() -= lr * st.m;
      break;
    case Optimizer::AdaptiveMoments: {
      const double b1 = 0.9, b2 = 0.999;
      st.m = float(b1) * st.m + float(1 - b1) * g;
      st.v = float(b2) * st.v + float(1 - b2) * g.square();
      const float c1 = float(1 - std::pow(b1, st.step)), c2 = float(1 - std::pow(b2, st.step));
      canvas.data() -= lr * (st.m / c1) / ((st.v / c2).sqrt() + 1e-8f);
      break;
    }
  }
  canvas.clamp_unit();
}

constexpr char kStateMagic[8] = {'C', 'X', 'P', 'S', 'T', 'A', 'T', '1'};

void write_floats(std::ofstream& os, const Storage& s) {
  os.write(reinterpret_cast<const char*>(s.data()), std::streamsize(std::size_t(s.size()) * sizeof(float)));
}

void read_floats(std::ifstream& is, Storage& s) {
  is.read(reinterpret_cast<char*>(s.data()), std::streamsize(std::size_t(s.size()) * sizeof(float)));
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("malformed " + path.string() + ": " + e.what());
  }
}

void save_checkpoint(const fs::path& dir, int iteration, const Image<float>& canvas, const OptimizerState& st,
                     const TrainingTrace& trace, const std::string& config_hash) {
  fs::create_directories(dir);
  write_png(dir / "canvas.png", canvas);
  {
    std::ofstream os(dir / "state.bin", std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint state in " + dir.string());
    os.write(kStateMagic, sizeof kStateMagic);
    const std::int64_t header[4] = {iteration, canvas.height(), canvas.width(), st.step};
    os.write(reinterpret_cast<const char*>(header), sizeof header);
    write_floats(os, canvas.data());
    write_floats(os, st.m);
    write_floats(os, st.v);
  }
  const TrainingStep* last = trace.steps.empty() ? nullptr : &trace.steps.back();
  write_json(dir / "checkpoint.json",
             {{"iteration", iteration},
              {"config_hash", config_hash},
              {"canvas_checksum", canvas_checksum(canvas)},
              {"metrics",
               last ? json{{"loss", to_json(last->loss)}, {"mean_confidence", last->mean_confidence}} : json::object()}});
  write_json(dir / "trace.json", to_json(trace));
}

bool load_checkpoint(const fs::path& dir, const std::string& config_hash, int& iteration, Image<float>& canvas,
                     OptimizerState& st, TrainingTrace& trace) {
  if (!fs::exists(dir / "state.bin")) return false;
  const json meta = read_json(dir / "checkpoint.json");
  if (!config_hash.empty() && meta.value("config_hash", std::string()) != config_hash)
    throw ConfigError("/attack", "checkpoint in " + dir.string() + " was written by a different config");
  std::ifstream is(dir / "state.bin", std::ios::binary);
  char magic[8];
  std::int64_t header[4];
  is.read(magic, sizeof magic);
  is.read(reinterpret_cast<char*>(header), sizeof header);
  if (!is || std::memcmp(magic, kStateMagic, sizeof magic) != 0) throw IoError("corrupt checkpoint state in " + dir.string());
  if (header[1] != canvas.height() || header[2] != canvas.width())
    throw DimensionError("checkpoint canvas size does not match config");
  iteration = int(header[0]);
  st.step = int(header[3]);
  read_floats(is, canvas.data());
  read_floats(is, st.m);
  read_floats(is, st.v);
  if (!is) throw IoError("truncated checkpoint state in " + dir.string());
  trace = trace_from_json(read_json(dir / "trace.json"));
  if (int(trace.steps.size()) != iteration) throw IoError("checkpoint trace length mismatch in " + dir.string());
  return true;
}

[[noreturn]] void numeric_abort(const TrainOptions& options, int iteration, const Image<float>& canvas,
                                const Storage& grad, const LossBreakdown& loss) {
  const fs::path dir = options.checkpoint_dir ? *options.checkpoint_dir : fs::temp_directory_path() / "ctxpatch";
  fs::create_directories(dir);
  const fs::path dump = dir / ("nan_dump_" + std::to_string(iteration) + ".json");
  const auto finite = [](const Storage& s) { return Index(s.isFinite().count()); };
  write_json(dump, {{"iteration", iteration},
                    {"loss", to_json(loss)},
                    {"canvas_finite", finite(canvas.data())},
                    {"grad_finite", finite(grad)},
                    {"elements", canvas.data().size()},
                    {"canvas", std::vector<float>(canvas.data().data(), canvas.data().data() + canvas.data().size())},
                    {"grad", std::vector<float>(grad.data(), grad.data() + grad.size())}});
  throw NumericError("non-finite loss or gradient at iteration " + std::to_string(iteration) + "; state dumped to " +
                     dump.string());
}

}  // namespace

PatchResult train_patch(const std::vector<Scene>& dataset, const DetectorWeights& detector, const AttackConfig& config,
                        const TrainOptions& options) {
  config.validate();
  if (dataset.empty()) throw InvalidArgument("attack training needs a non-empty dataset");
  if (options.require_gate) {
    const auto gate = detector.gate_metric();
    if (!gate)
      throw UnderTrainedError("detector " + detector.arch.name + " has no recorded clean-confidence gate metric", 0.0);
    if (*gate < options.gate)
      throw UnderTrainedError("detector " + detector.arch.name + " clean confidence " + std::to_string(*gate) +
                                  " is below the gate " + std::to_string(options.gate),
                              *gate);
  }

  const ConvDetector<float> det(detector);
  std::vector<SceneCompositor<float>> comps;
  std::vector<const Scene*> scenes;
  comps.reserve(dataset.size());
  for (const auto& s : dataset) {
    comps.emplace_back(s, config.context_scale, config.canvas_size, config.canvas_size);
    scenes.push_back(&s);
  }
  const PatchObjective<float> objective(det, comps, scenes, config);

  Rng init_rng = make_rng(config.seed, "attack/init");
  Image<float> canvas = init_canvas(config.canvas_size, init_rng);
  OptimizerState st{Storage::Zero(3, canvas.pixels()), Storage::Zero(3, canvas.pixels()), 0};
  TrainingTrace trace;
  int start = 0;
  if (options.resume && options.checkpoint_dir)
    load_checkpoint(*options.checkpoint_dir, options.config_hash, start, canvas, st, trace);

  const auto t0 = std::chrono::steady_clock::now();
  const double resumed_wall = trace.steps.empty() ? 0.0 : trace.steps.back().wall_seconds;
  const int every = config.early_stop.eval_every;
  for (int it = start; it < config.iterations && trace.early_stop_at < 0; ++it) {
    const auto batch = sample_batch(config, dataset.size(), it);
    const auto r = objective.evaluate(canvas, batch, options.workers);
    if (!std::isfinite(r.loss.total) || !r.grad.isFinite().all()) numeric_abort(options, it, canvas, r.grad, r.loss);
    if (!r.foreground_preserved)
      throw Error("composited image modified target foreground at iteration " + std::to_string(it));
    optimizer_step(config, canvas, r.grad, st);

    TrainingStep step;
    step.iteration = it;
    step.loss = r.loss;
    step.tv_exact = r.tv_exact;
    step.mean_confidence = r.mean_confidence;
    step.foreground_checked = r.composites;
    step.wall_seconds =
        resumed_wall + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    trace.steps.push_back(step);
    if (options.on_step) options.on_step(step);

    const int done = it + 1;
    if (config.early_stop.patience > 0 && done % every == 0) {
      double sum = 0;
      for (int k = done - every; k < done; ++k) sum += trace.steps[std::size_t(k)].mean_confidence;
      trace.evaluations.push_back(sum / every);
      if (early_stop(trace.evaluations, config.early_stop.patience, config.early_stop.min_delta).stop)
        trace.early_stop_at = done;
    }
    if (options.checkpoint_dir && config.checkpoint_every > 0 && done % config.checkpoint_every == 0)
      save_checkpoint(*options.checkpoint_dir, done, canvas, st, trace, options.config_hash);
  }
  trace.canvas_checksum = canvas_checksum(canvas);

  PatchResult result;
  result.patch.canvas = std::move(canvas);
  result.patch.context_scale = config.context_scale;
  result.patch.proxy = detector.arch.name;
  result.patch.proxy_hash = detector.hash();
  result.trace = std::move(trace);
  return result;
}

void save_patch(const fs::path& dir, const PatchDesign& patch, const json& extra) {
  fs::create_directories(dir);
  write_png(dir / "patch.png", patch.canvas);
  {
    std::ofstream os(dir / "canvas.f32", std::ios::binary);
    if (!os) throw IoError("cannot write " + (dir / "canvas.f32").string());
    write_floats(os, patch.canvas.data());
  }
  json meta = {{"format", "ctxpatch-patch"},
               {"version", 1},
               {"height", patch.canvas.height()},
               {"width", patch.canvas.width()},
               {"context_scale", patch.context_scale},
               {"proxy", patch.proxy},
               {"proxy_hash", std::to_string(patch.proxy_hash)},
               {"canvas_checksum", canvas_checksum(patch.canvas)}};
  if (extra.is_object()) meta.update(extra);
  write_json(dir / "patch.json", meta);
}

PatchDesign load_patch(const fs::path& dir) {
  const json meta = read_json(dir / "patch.json");
  PatchDesign p;
  try {
    if (meta.at("format") != "ctxpatch-patch") throw IoError((dir / "patch.json").string() + ": not a patch");
    p.canvas = Image<float>(meta.at("height").get<Index>(), meta.at("width").get<Index>());
    p.context_scale = meta.at("context_scale").get<double>();
    p.proxy = meta.at("proxy").get<std::string>();
    p.proxy_hash = std::stoull(meta.at("proxy_hash").get<std::string>());
  } catch (const json::exception& e) {
    throw IoError("malformed " + (dir / "patch.json").string() + ": " + e.what());
  }
  std::ifstream is(dir / "canvas.f32", std::ios::binary);
  if (!is) throw IoError("missing " + (dir / "canvas.f32").string());
  read_floats(is, p.canvas.data());
  if (!is) throw IoError("truncated " + (dir / "canvas.f32").string());
  if (canvas_checksum(p.canvas) != meta.value("canvas_checksum", std::string()))
    throw IoError("patch checksum mismatch in " + dir.string());
  return p;
}

}  // namespace ctxpatch
