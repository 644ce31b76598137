#include "ctxpatch/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ctxpatch/config.hpp"
#include "ctxpatch/png_io.hpp"

namespace ctxpatch {
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Context {
  RunConfig cfg;
  fs::path root;
  int workers = 1;
  std::string hash;
  std::ostream* out = nullptr;

  fs::path train_dir() const { return root / "data" / "train"; }
  fs::path heldout_dir() const { return root / "data" / "heldout"; }
  fs::path detector_path(const std::string& name) const { return root / "detectors" / (name + ".json"); }
  fs::path attack_dir() const { return root / "attacks" / "contextual"; }
  fs::path eval_dir() const { return root / "eval"; }
  fs::path gradcam_dir() const { return root / "gradcam"; }
  fs::path report_dir() const { return root / "report"; }
  fs::path sweep_dir(const std::string& p) const { return root / "sweep" / p; }

  void log(json j) const {
    j["config_hash"] = hash;
    *out << j.dump() << std::endl;
  }
};

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path))
    throw MissingArtifact(path.string(), "missing " + path.string() + " (run '" + producer + "' first)");
}

std::vector<Scene> load_scenes(const fs::path& dir) {
  require(dir / "manifest.json", "synth");
  return read_dataset(dir);
}

DetectorWeights load_detector(const Context& ctx, const std::string& name) {
  const fs::path p = ctx.detector_path(name);
  require(p, "train-detector");
  return load_weights(p);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

json read_json_file(const fs::path& path, const std::string& producer) {
  require(path, producer);
  std::ifstream is(path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("malformed " + path.string() + ": " + e.what());
  }
}

PatchDesign noise_control(const Context& ctx, double context_scale) {
  Rng rng = make_rng(ctx.cfg.eval.seed, "noise-control");
  PatchDesign p;
  p.canvas = init_canvas(ctx.cfg.attack.canvas_size, rng);
  p.context_scale = context_scale;
  p.proxy = "noise";
  return p;
}

// ---------------------------------------------------------------- commands

int cmd_synth(const Context& ctx) {
  write_dataset(ctx.cfg.synth, ctx.cfg.train_scenes, ctx.train_dir(), ctx.workers);
  SynthConfig held = ctx.cfg.synth;
  held.seed = ctx.cfg.heldout_seed();
  write_dataset(held, ctx.cfg.heldout_scenes, ctx.heldout_dir(), ctx.workers);
  ctx.log({{"command", "synth"},
           {"status", "ok"},
           {"train", ctx.train_dir().string()},
           {"heldout", ctx.heldout_dir().string()},
           {"train_scenes", ctx.cfg.train_scenes},
           {"heldout_scenes", ctx.cfg.heldout_scenes}});
  return kExitOk;
}

int cmd_train_detector(const Context& ctx, const std::string& only) {
  const auto train = load_scenes(ctx.train_dir());
  const auto heldout = load_scenes(ctx.heldout_dir());
  std::vector<std::string> names{ctx.cfg.detector.proxy};
  for (const auto& n : ctx.cfg.detector.others) names.push_back(n);
  if (!only.empty()) {
    if (std::find(names.begin(), names.end(), only) == names.end())
      throw ConfigError("/detector", "detector '" + only + "' is not configured");
    names = {only};
  }
  for (const auto& name : names) {
    DetectorRecipe recipe = ctx.cfg.detector.recipe;
    recipe.seed = ctx.cfg.detector_seed(name);
    recipe.workers = ctx.workers;
    const TrainedDetector t = train_toy_detector(DetectorRegistry::instance().get(name), train, heldout, recipe);
    save_weights(ctx.detector_path(name), t.weights);
    ctx.log({{"command", "train-detector"},
             {"status", "ok"},
             {"detector", name},
             {"heldout_confidence", t.heldout_confidence},
             {"final_loss", t.final_loss},
             {"weights", ctx.detector_path(name).string()},
             {"weights_hash", std::to_string(t.weights.hash())}});
  }
  return kExitOk;
}

PatchResult run_attack(const Context& ctx, const AttackConfig& attack, const fs::path& dir, bool resume) {
  const auto train = load_scenes(ctx.train_dir());
  const DetectorWeights proxy = load_detector(ctx, ctx.cfg.detector.proxy);
  TrainOptions opt;
  opt.workers = ctx.workers;
  opt.gate = ctx.cfg.detector.recipe.gate;
  opt.config_hash = ctx.hash;
  opt.resume = resume;
  if (attack.checkpoint_every > 0) opt.checkpoint_dir = dir / "checkpoint";
  PatchResult r = train_patch(train, proxy, attack, opt);
  save_patch(dir, r.patch, {{"config_hash", ctx.hash}, {"attack", to_json(attack)}});
  write_text(dir / "trace.json", to_json(r.trace).dump() + "\n");
  return r;
}

int cmd_attack(const Context& ctx, bool resume) {
  const PatchResult r = run_attack(ctx, ctx.cfg.attack, ctx.attack_dir(), resume);
  const auto& steps = r.trace.steps;
  ctx.log({{"command", "attack"},
           {"status", "ok"},
           {"patch", ctx.attack_dir().string()},
           {"iterations", steps.size()},
           {"initial_adv", steps.front().loss.adv},
           {"final_adv", steps.back().loss.adv},
           {"final_tv", steps.back().tv_exact},
           {"canvas_checksum", r.trace.canvas_checksum}});
  return kExitOk;
}

int cmd_eval(const Context& ctx, const std::string& attack) {
  if (attack != "none" && attack != "contextual")
    throw ConfigError("/eval/attack", "attack must be 'none' or 'contextual', got '" + attack + "'");
  const auto heldout = load_scenes(ctx.heldout_dir());
  std::vector<std::string> names{ctx.cfg.detector.proxy};
  for (const auto& n : ctx.cfg.detector.others) names.push_back(n);
  std::vector<std::pair<std::string, ConvDetector<float>>> dets;
  for (const auto& n : names) dets.emplace_back(n, ConvDetector<float>(load_detector(ctx, n)));
  const auto& cfg = ctx.cfg.eval;
  std::vector<std::string> ids;
  for (const auto& r : select_targets(heldout, cfg.max_targets)) ids.push_back(r.id);

  std::vector<ConfidenceTable> tables;
  bool fg_ok = true;
  std::size_t renders = 0;
  const auto track = [&](const EvalStats& s) {
    fg_ok = fg_ok && s.foreground_preserved;
    renders += s.renders;
  };
  if (attack == "none") {
    ConfidenceTable t{"clean", ids, {}};
    for (const auto& [n, d] : dets) {
      EvalStats s;
      t.add(evaluate(d, heldout, nullptr, cfg, "clean", ctx.workers, &s));
      track(s);
    }
    tables.push_back(std::move(t));
  } else {
    require(ctx.attack_dir() / "patch.json", "attack");
    const PatchDesign patch = load_patch(ctx.attack_dir());
    const PatchDesign noise = noise_control(ctx, patch.context_scale);
    ConfidenceTable white{"whitebox", ids, {}}, black{"blackbox", ids, {}};
    for (const auto& [n, d] : dets) {
      ConfidenceTable& t = d.weights_hash() == patch.proxy_hash ? white : black;
      EvalStats s;
      t.add(evaluate(d, heldout, nullptr, cfg, "clean", ctx.workers, &s));
      track(s);
      if (&t == &white)
        t.add(evaluate(d, heldout, &patch, cfg, "white-box", ctx.workers, &s));
      else
        t.add(transfer_evaluate(patch, d, heldout, cfg, "black-box", ctx.workers, &s));
      track(s);
      t.add(evaluate(d, heldout, &noise, cfg, "noise", ctx.workers, &s));
      track(s);
    }
    if (white.rows.empty())
      throw InvalidArgument("the patch proxy does not match any configured detector checkpoint");
    tables.push_back(std::move(white));
    if (!black.rows.empty()) tables.push_back(std::move(black));
  }
  if (!fg_ok) throw Error("an evaluation render modified target foreground pixels");

  json tj = json::array();
  for (const auto& t : tables) {
    write_text(ctx.eval_dir() / (t.name + ".csv"), to_csv(t));
    tj.push_back(to_json(t));
  }
  write_text(ctx.eval_dir() / "tables.json",
             json{{"tables", tj}, {"attack", attack}, {"renders", renders}, {"foreground_preserved", fg_ok}}.dump(2) + "\n");
  json rows = json::array();
  for (const auto& t : tables)
    for (const auto& r : t.rows) rows.push_back({{"table", t.name}, {"detector", r.detector}, {"attack", r.attack}, {"avg", r.avg}});
  ctx.log({{"command", "eval"}, {"status", "ok"}, {"tables", ctx.eval_dir().string()}, {"rows", rows}});
  return kExitOk;
}

int cmd_gradcam(const Context& ctx, std::string detector, std::string layer, int overlays) {
  if (detector.empty()) detector = ctx.cfg.detector.proxy;
  EvalConfig cfg = ctx.cfg.eval;
  if (!layer.empty()) cfg.gradcam_layer = layer;
  const auto heldout = load_scenes(ctx.heldout_dir());
  const ConvDetector<float> det(load_detector(ctx, detector));
  det.arch().layer_index(cfg.gradcam_layer);
  const auto samples = attention_analysis(det, heldout, cfg, ctx.workers);
  fs::create_directories(ctx.gradcam_dir());
  double sum = 0;
  json list = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& a = samples[i];
    sum += a.context_fraction;
    json item = {{"scene_id", a.scene_id}, {"target", a.target}, {"context_fraction", a.context_fraction}};
    if (int(i) < overlays) {
      const std::string file = "heatmap_" + a.scene_id + "_" + std::to_string(a.target) + ".png";
      Mask<float> m(a.heatmap.height, a.heatmap.width);
      for (Index p = 0; p < m.pixels(); ++p) m.data()(p) = float(a.heatmap.data.data()[p]);
      write_mask_png(ctx.gradcam_dir() / file, m);
      item["heatmap"] = file;
    }
    list.push_back(item);
  }
  const double mean = samples.empty() ? 0.0 : sum / double(samples.size());
  write_text(ctx.gradcam_dir() / "attention.json",
             json{{"detector", detector}, {"layer", cfg.gradcam_layer}, {"mean_context_fraction", mean}, {"samples", list}}
                     .dump(2) + "\n");
  ctx.log({{"command", "gradcam"},
           {"status", "ok"},
           {"detector", detector},
           {"layer", cfg.gradcam_layer},
           {"targets", samples.size()},
           {"mean_context_fraction", mean}});
  return kExitOk;
}

int cmd_report(const Context& ctx) {
  ReportInputs in;
  const json tables = read_json_file(ctx.eval_dir() / "tables.json", "eval");
  for (const auto& t : tables.at("tables")) in.tables.push_back(table_from_json(t));
  if (fs::exists(ctx.attack_dir() / "trace.json"))
    in.traces.push_back({"contextual", trace_from_json(read_json_file(ctx.attack_dir() / "trace.json", "attack"))});
  if (fs::exists(ctx.gradcam_dir() / "attention.json")) {
    const json att = read_json_file(ctx.gradcam_dir() / "attention.json", "gradcam");
    in.extra["attention"] = {{"detector", att.at("detector")},
                             {"layer", att.at("layer")},
                             {"mean_context_fraction", att.at("mean_context_fraction")}};
    std::vector<Scene> heldout;
    for (const auto& s : att.at("samples")) {
      if (!s.contains("heatmap")) continue;
      if (heldout.empty()) heldout = load_scenes(ctx.heldout_dir());
      const std::string id = s.at("scene_id").get<std::string>();
      const auto it = std::find_if(heldout.begin(), heldout.end(), [&](const Scene& sc) { return sc.scene_id == id; });
      if (it == heldout.end()) continue;
      const Mask<float> m = read_mask_png(ctx.gradcam_dir() / s.at("heatmap").get<std::string>());
      Heatmap h{m.height(), m.width(), decltype(Heatmap::data)(m.height(), m.width())};
      for (Index p = 0; p < m.pixels(); ++p) h.data.data()[p] = m.data()(p);
      in.heatmaps.push_back({id + "_" + std::to_string(s.at("target").get<int>()), it->image, std::move(h)});
    }
  }
  if (fs::exists(ctx.root / "sweep"))
    for (const auto& entry : fs::directory_iterator(ctx.root / "sweep")) {
      const fs::path p = entry.path() / "trend.json";
      if (!fs::exists(p)) continue;
      const json tj = read_json_file(p, "sweep");
      std::vector<TrendRow> rows;
      for (const auto& r : tj.at("rows"))
        rows.push_back({r.at("value").get<double>(), r.at("attacked_avg").get<double>(), r.at("clean_avg").get<double>(),
                        r.at("final_tv").get<double>()});
      in.trends.push_back(make_trend(tj.at("parameter"), rows, tj.at("metric")));
    }
  in.extra["config_hash"] = ctx.hash;
  emit_report(in, ctx.report_dir());
  ctx.log({{"command", "report"},
           {"status", "ok"},
           {"report", ctx.report_dir().string()},
           {"tables", in.tables.size()},
           {"traces", in.traces.size()},
           {"heatmaps", in.heatmaps.size()},
           {"trends", in.trends.size()}});
  return kExitOk;
}

int cmd_sweep(const Context& ctx, const std::string& param, const std::vector<double>& values, std::string metric) {
  if (param != "context_scale" && param != "lambda" && param != "step_size")
    throw ConfigError("/sweep/param", "sweep parameter must be context_scale, lambda or step_size");
  if (values.empty()) throw ConfigError("/sweep/values", "sweep needs at least one value");
  if (metric.empty()) metric = param == "lambda" ? "final_tv" : "attacked_avg";
  const auto heldout = load_scenes(ctx.heldout_dir());
  const ConvDetector<float> det(load_detector(ctx, ctx.cfg.detector.proxy));
  const ConfidenceRow clean = evaluate(det, heldout, nullptr, ctx.cfg.eval, "clean", ctx.workers);
  std::vector<TrendRow> rows;
  for (double v : values) {
    AttackConfig a = ctx.cfg.attack;
    if (param == "context_scale") a.context_scale = v;
    else if (param == "lambda") a.lambda = v;
    else a.step_size = v;
    try {
      a.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError("/sweep/values", e.what());
    }
    std::ostringstream name;
    name << v;
    const fs::path dir = ctx.sweep_dir(param) / name.str();
    const PatchResult r = run_attack(ctx, a, dir, false);
    EvalStats s;
    const ConfidenceRow attacked = evaluate(det, heldout, &r.patch, ctx.cfg.eval, "white-box", ctx.workers, &s);
    if (!s.foreground_preserved) throw Error("an evaluation render modified target foreground pixels");
    rows.push_back({v, attacked.avg, clean.avg, tv_loss(r.patch.canvas, 0.0)});
    ctx.log({{"command", "sweep"}, {"status", "progress"}, {"parameter", param}, {"value", v}, {"attacked_avg", attacked.avg},
             {"final_tv", rows.back().final_tv}});
  }
  const TrendReport trend = make_trend(param, rows, metric);
  write_text(ctx.sweep_dir(param) / "trend.json", to_json(trend).dump(2) + "\n");
  write_text(ctx.sweep_dir(param) / ("trend_" + param + ".csv"), to_csv(trend));
  ctx.log({{"command", "sweep"},
           {"status", "ok"},
           {"parameter", param},
           {"metric", metric},
           {"non_increasing", trend.non_increasing},
           {"flagged", !trend.non_increasing},
           {"trend", (ctx.sweep_dir(param) / "trend.json").string()}});
  return kExitOk;
}

std::string error_line(const std::string& kind, const std::string& message, int code, const std::string& path = "") {
  json j = {{"status", "error"}, {"kind", kind}, {"code", code}, {"message", message}};
  if (!path.empty()) j["path"] = path;
  return j.dump();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contextual adversarial patches against toy aerial detectors", "ctxpatch"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  int workers = 1;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "top-level seed");
  app.add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", out_dir, "output root");
  app.add_option("--set", sets, "dotted override key=value (repeatable)");

  auto* synth = app.add_subcommand("synth", "synthesize train and held-out scenes");
  std::string only_detector;
  auto* train = app.add_subcommand("train-detector", "train the configured detectors");
  train->add_option("--detector", only_detector, "train only this detector");
  bool resume = false;
  auto* attack = app.add_subcommand("attack", "optimize the contextual patch against the proxy");
  attack->add_flag("--resume", resume, "resume from the last checkpoint");
  std::string eval_attack = "contextual";
  auto* eval = app.add_subcommand("eval", "confidence tables on held-out scenes");
  eval->add_option("--attack", eval_attack, "contextual or none");
  std::string cam_detector, cam_layer;
  int overlays = 4;
  auto* gradcam = app.add_subcommand("gradcam", "attention maps and context fractions");
  gradcam->add_option("--detector", cam_detector, "detector (default: proxy)");
  gradcam->add_option("--layer", cam_layer, "feature layer");
  gradcam->add_option("--overlays", overlays, "heatmaps to keep");
  auto* report = app.add_subcommand("report", "emit CSV, JSON and PNG report bundle");
  std::string sweep_param, sweep_metric;
  std::vector<double> sweep_values;
  auto* sweep = app.add_subcommand("sweep", "attack + eval per parameter value");
  sweep->add_option("--param", sweep_param, "context_scale, lambda or step_size")->required();
  sweep->add_option("--values", sweep_values, "comma separated values")->delimiter(',');
  sweep->add_option("--metric", sweep_metric, "attacked_avg or final_tv");
  for (auto* sub : {synth, train, attack, eval, gradcam, report, sweep}) sub->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << error_line("usage", e.what(), kExitInvalidConfig) << std::endl;
    return kExitInvalidConfig;
  }

  try {
    json doc = json::object();
    if (!config_path.empty()) {
      std::ifstream is(config_path);
      try {
        doc = json::parse(is);
      } catch (const json::exception& e) {
        throw ConfigError("/", "malformed JSON in " + config_path + ": " + e.what());
      }
    }
    for (const auto& s : sets) apply_override(doc, s);
    if (*seed_opt) doc["seed"] = seed;

    Context ctx;
    ctx.cfg = run_config_from_json(doc);
    ctx.workers = workers;
    ctx.out = &out;
    if (const char* env = std::getenv("CONTEXTPATCH_OUT"); env && *env) ctx.cfg.out = env;
    if (!out_dir.empty()) ctx.cfg.out = out_dir;
    ctx.root = ctx.cfg.out;
    ctx.hash = config_hash(ctx.cfg);

    std::string command;
    for (auto* sub : app.get_subcommands()) command = sub->get_name();
    ctx.log({{"event", "start"}, {"command", command}, {"out", ctx.root.string()}});

    if (*synth) return cmd_synth(ctx);
    if (*train) return cmd_train_detector(ctx, only_detector);
    if (*attack) return cmd_attack(ctx, resume);
    if (*eval) return cmd_eval(ctx, eval_attack);
    if (*gradcam) return cmd_gradcam(ctx, cam_detector, cam_layer, overlays);
    if (*report) return cmd_report(ctx);
    if (*sweep) return cmd_sweep(ctx, sweep_param, sweep_values, sweep_metric);
    return kExitInvalidConfig;
  } catch (const ConfigError& e) {
    err << error_line("invalid_config", e.what(), kExitInvalidConfig, e.path()) << std::endl;
    return kExitInvalidConfig;
  } catch (const MissingArtifact& e) {
    err << error_line("missing_artifact", e.what(), kExitMissingArtifact, e.path()) << std::endl;
    return kExitMissingArtifact;
  } catch (const UnderTrainedError& e) {
    err << error_line("under_trained", e.what(), kExitUnderTrained) << std::endl;
    return kExitUnderTrained;
  } catch (const std::exception& e) {
    err << error_line("failure", e.what(), kExitFailure) << std::endl;
    return kExitFailure;
  }
}

}  // namespace ctxpatch
