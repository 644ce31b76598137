#include "ctxpatch/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "ctxpatch/png_io.hpp"
#include "plot.hpp"

namespace ctxpatch {
using nlohmann::json;
namespace fs = std::filesystem;

void EvalConfig::validate() const {
  if (renders < 1) throw InvalidArgument("eval.renders must be >= 1");
  if (max_targets < 0) throw InvalidArgument("eval.max_targets must be >= 0");
  render_transform.validate();
}

json to_json(const EvalConfig& c) {
  return {{"renders", c.renders},
          {"render_transform", to_json(c.render_transform)},
          {"max_targets", c.max_targets},
          {"conf_threshold", c.conf_threshold},
          {"nms_iou", c.nms_iou},
          {"iou_min", c.iou_min},
          {"gradcam_layer", c.gradcam_layer},
          {"seed", c.seed}};
}

EvalConfig eval_config_from_json(const json& j) {
  EvalConfig c;
  c.renders = j.value("renders", c.renders);
  if (j.contains("render_transform")) c.render_transform = transform_config_from_json(j.at("render_transform"));
  c.max_targets = j.value("max_targets", c.max_targets);
  c.conf_threshold = j.value("conf_threshold", c.conf_threshold);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  c.iou_min = j.value("iou_min", c.iou_min);
  c.gradcam_layer = j.value("gradcam_layer", c.gradcam_layer);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

double round6(double v) { return std::round(v * 1e6) / 1e6; }

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void ConfidenceTable::add(ConfidenceRow row) {
  if (row.cells.size() != target_ids.size())
    throw DimensionError("row has " + std::to_string(row.cells.size()) + " cells, table has " +
                         std::to_string(target_ids.size()) + " targets");
  for (double& c : row.cells) {
    if (!(c >= 0 && c <= 1)) throw InvalidArgument("confidence outside [0,1]");
    c = round6(c);
  }
  row.avg = mean(row.cells);
  rows.push_back(std::move(row));
}

const ConfidenceRow& ConfidenceTable::row(const std::string& detector, const std::string& attack) const {
  for (const auto& r : rows)
    if (r.detector == detector && r.attack == attack) return r;
  throw InvalidArgument("table " + name + " has no row " + detector + "/" + attack);
}

json to_json(const ConfidenceTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) rows.push_back({{"detector", r.detector}, {"attack", r.attack}, {"cells", r.cells}, {"avg", r.avg}});
  return {{"name", t.name}, {"target_ids", t.target_ids}, {"rows", rows}};
}

ConfidenceTable table_from_json(const json& j) {
  ConfidenceTable t;
  t.name = j.at("name").get<std::string>();
  t.target_ids = j.at("target_ids").get<std::vector<std::string>>();
  for (const auto& r : j.at("rows"))
    t.add({r.at("detector").get<std::string>(), r.at("attack").get<std::string>(),
           r.at("cells").get<std::vector<double>>(), 0.0});
  return t;
}

std::string to_csv(const ConfidenceTable& t) {
  std::vector<std::size_t> order(t.target_ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return t.target_ids[a] < t.target_ids[b]; });
  std::string out = "detector,attack";
  for (std::size_t i : order) out += "," + t.target_ids[i];
  out += ",Avg\n";
  for (const auto& r : t.rows) {
    out += r.detector + "," + r.attack;
    for (std::size_t i : order) out += "," + fixed6(r.cells[i]);
    out += "," + fixed6(r.avg) + "\n";
  }
  return out;
}

std::vector<TargetRef> select_targets(const std::vector<Scene>& scenes, int max_targets) {
  std::vector<TargetRef> refs;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (std::size_t t = 0; t < scenes[s].targets.size(); ++t) {
      if (max_targets > 0 && int(refs.size()) >= max_targets) return refs;
      char id[16];
      std::snprintf(id, sizeof id, "T%03zu", refs.size() + 1);
      refs.push_back({s, t, id});
    }
  return refs;
}

ConfidenceRow evaluate(const ConvDetector<float>& det, const std::vector<Scene>& scenes, const PatchDesign* patch,
                       const EvalConfig& cfg, const std::string& attack_id, int workers, EvalStats* stats,
                       bool zero_mask) {
  cfg.validate();
  const auto refs = select_targets(scenes, cfg.max_targets);
  std::map<std::size_t, std::vector<std::size_t>> by_scene;  // scene -> indices into refs
  for (std::size_t i = 0; i < refs.size(); ++i) by_scene[refs[i].scene].push_back(i);
  std::vector<std::size_t> scene_list;
  for (const auto& [s, v] : by_scene) scene_list.push_back(s);

  struct Slot {
    std::vector<double> sum, count;
    std::size_t renders = 0;
    bool fg_ok = true;
  };
  std::vector<Slot> slots(scene_list.size());
  parallel_for(scene_list.size(), workers, [&](std::size_t k) {
    const std::size_t s = scene_list[k];
    const Scene& scene = scenes[s];
    const auto& members = by_scene.at(s);
    Slot& slot = slots[k];
    slot.sum.assign(members.size(), 0.0);
    slot.count.assign(members.size(), 0.0);
    Image<float> composed = scene.image;
    if (patch) {
      const SceneCompositor<float> comp(scene, patch->context_scale, patch->canvas.height(), patch->canvas.width(),
                                        zero_mask ? 0.0 : 1.0);
      composed = comp.forward(patch->canvas);
      slot.fg_ok = foreground_preserved(scene.image, composed, comp.foreground());
    }
    for (int r = 0; r < cfg.renders; ++r) {
      Transform t;
      if (r > 0) {
        Rng rng = make_rng(cfg.seed, "eval/render", std::uint64_t(s) * 1000003ull + std::uint64_t(r));
        t = sample_transform(cfg.render_transform, rng);
      }
      TransformPass<float> pass(composed.dims(), t);
      const Image<float> observed = pass.forward(composed);
      const auto dets = det.detect(observed, cfg.conf_threshold, cfg.nms_iou);
      ++slot.renders;
      for (std::size_t m = 0; m < members.size(); ++m) {
        const auto box = transformed_target_box(pass, scene.targets[refs[members[m]].target]);
        if (!box) continue;
        slot.sum[m] += match_detections(dets, {*box}, cfg.iou_min)[0].confidence;
        slot.count[m] += 1;
      }
    }
  });

  ConfidenceRow row;
  row.detector = det.arch().name;
  row.attack = attack_id;
  row.cells.assign(refs.size(), 0.0);
  EvalStats st;
  for (std::size_t k = 0; k < scene_list.size(); ++k) {
    const auto& members = by_scene.at(scene_list[k]);
    for (std::size_t m = 0; m < members.size(); ++m)
      row.cells[members[m]] = slots[k].count[m] > 0 ? slots[k].sum[m] / slots[k].count[m] : 0.0;
    st.renders += slots[k].renders;
    st.foreground_preserved = st.foreground_preserved && slots[k].fg_ok;
  }
  row.avg = mean(row.cells);
  if (stats) *stats = st;
  return row;
}

ConfidenceRow transfer_evaluate(const PatchDesign& patch, const ConvDetector<float>& other,
                                const std::vector<Scene>& scenes, const EvalConfig& cfg, const std::string& attack_id,
                                int workers, EvalStats* stats) {
  if (other.weights_hash() == patch.proxy_hash)
    throw InvalidArgument("transfer evaluation on the proxy detector " + other.arch().name + " is a white-box evaluation");
  return evaluate(other, scenes, &patch, cfg, attack_id, workers, stats);
}

double attention_context_fraction(const Heatmap& heatmap, const TargetRegion& region, const Mask<float>* exclude) {
  const ImageDims dims{heatmap.height, heatmap.width};
  const MaskPair<double> masks = extract_masks<double>(region, dims, exclude);
  double bg = 0, all = 0;
  for (Index p = 0; p < dims.pixels(); ++p) {
    const double h = heatmap.data.data()[p];
    bg += h * masks.bg.data()(p);
    all += h * std::max(masks.fg.data()(p), masks.bg.data()(p));
  }
  return all > 0 ? bg / all : 0.0;
}

std::vector<AttentionSample> attention_analysis(const ConvDetector<float>& det, const std::vector<Scene>& scenes,
                                                const EvalConfig& cfg, int workers) {
  std::vector<std::vector<AttentionSample>> per_scene(scenes.size());
  parallel_for(scenes.size(), workers, [&](std::size_t s) {
    const Scene& scene = scenes[s];
    const Mask<float> excl = foreground_union(scene);
    const DenseOutput<float> out = det.forward(scene.image);
    for (std::size_t t = 0; t < scene.targets.size(); ++t) {
      const auto cells = objective_cells(out, {scene.targets[t].bbox}, cfg.conf_threshold, cfg.nms_iou, cfg.iou_min);
      AttentionSample a;
      a.scene_id = scene.scene_id;
      a.target = t;
      a.heatmap = gradcam(det, scene.image, cfg.gradcam_layer, cells);
      a.context_fraction = attention_context_fraction(a.heatmap, scene.targets[t], &excl);
      per_scene[s].push_back(std::move(a));
    }
  });
  std::vector<AttentionSample> out;
  for (auto& v : per_scene)
    for (auto& a : v) out.push_back(std::move(a));
  return out;
}

TrendReport make_trend(std::string parameter, std::vector<TrendRow> rows, std::string metric) {
  if (metric != "attacked_avg" && metric != "final_tv") throw InvalidArgument("unknown trend metric '" + metric + "'");
  std::stable_sort(rows.begin(), rows.end(), [](const TrendRow& a, const TrendRow& b) { return a.value < b.value; });
  TrendReport t{std::move(parameter), std::move(metric), std::move(rows), true};
  const auto pick = [&](const TrendRow& r) { return t.metric == "final_tv" ? r.final_tv : r.attacked_avg; };
  for (std::size_t i = 1; i < t.rows.size(); ++i)
    if (pick(t.rows[i]) > pick(t.rows[i - 1])) t.non_increasing = false;
  return t;
}

json to_json(const TrendReport& t) {
  json rows = json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"value", r.value}, {"attacked_avg", r.attacked_avg}, {"clean_avg", r.clean_avg}, {"final_tv", r.final_tv}});
  return {{"parameter", t.parameter}, {"metric", t.metric}, {"rows", rows}, {"non_increasing", t.non_increasing},
          {"flagged", !t.non_increasing}};
}

std::string to_csv(const TrendReport& t) {
  std::string out = t.parameter + ",clean_avg,attacked_avg,final_tv\n";
  for (const auto& r : t.rows) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%g,%.6f,%.6f,%.6f\n", r.value, r.clean_avg, r.attacked_avg, r.final_tv);
    out += buf;
  }
  return out;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

json column_minima(const ConfidenceTable& t) {
  json out = json::array();
  const std::size_t cols = t.target_ids.size() + 1;
  for (std::size_t c = 0; c < cols && !t.rows.empty(); ++c) {
    const auto at = [&](const ConfidenceRow& r) { return c < t.target_ids.size() ? r.cells[c] : r.avg; };
    double best = at(t.rows[0]);
    for (const auto& r : t.rows) best = std::min(best, at(r));
    json rows = json::array();
    for (std::size_t i = 0; i < t.rows.size(); ++i)
      if (at(t.rows[i]) == best) rows.push_back(i);
    out.push_back({{"column", c < t.target_ids.size() ? t.target_ids[c] : "Avg"}, {"min", best}, {"rows", rows}});
  }
  return out;
}

}  // namespace

void emit_report(const ReportInputs& in, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir / "plots", ec);
  if (ec) throw IoError("cannot create report directory " + out_dir.string() + ": " + ec.message());

  json summary = {{"schema_version", 1}};
  json tables = json::array();
  for (const auto& t : in.tables) {
    const std::string file = t.name + ".csv";
    write_text(out_dir / file, to_csv(t));
    json tj = to_json(t);
    tj["csv"] = file;
    tj["column_min"] = column_minima(t);
    tables.push_back(tj);
    if (!t.rows.empty()) {
      std::vector<std::vector<double>> groups;
      for (const auto& r : t.rows) groups.push_back({r.avg});
      write_png(out_dir / "plots" / ("bars_" + t.name + ".png"), plot::bar_chart(groups));
    }
  }
  summary["tables"] = tables;

  json traces = json::array();
  for (const auto& nt : in.traces) {
    std::vector<double> adv, conf;
    for (const auto& s : nt.trace.steps) {
      adv.push_back(s.loss.adv);
      conf.push_back(s.mean_confidence);
    }
    const std::string file = "plots/loss_" + nt.name + ".png";
    write_png(out_dir / file, plot::line_plot({adv, conf}));
    json tj = {{"name", nt.name}, {"iterations", nt.trace.steps.size()}, {"canvas_checksum", nt.trace.canvas_checksum},
               {"early_stop_at", nt.trace.early_stop_at}, {"plot", file}};
    if (!nt.trace.steps.empty()) {
      tj["initial_adv"] = nt.trace.steps.front().loss.adv;
      tj["final_adv"] = nt.trace.steps.back().loss.adv;
      tj["final_tv"] = nt.trace.steps.back().tv_exact;
    }
    traces.push_back(tj);
  }
  summary["traces"] = traces;

  json heatmaps = json::array();
  for (const auto& h : in.heatmaps) {
    const std::string file = "plots/heatmap_" + h.name + ".png";
    write_png(out_dir / file, plot::heatmap_overlay(h.image, h.heatmap));
    heatmaps.push_back({{"name", h.name}, {"plot", file}});
  }
  summary["heatmaps"] = heatmaps;

  json trends = json::array();
  for (const auto& t : in.trends) {
    const std::string file = "trend_" + t.parameter + ".csv";
    write_text(out_dir / file, to_csv(t));
    json tj = to_json(t);
    tj["csv"] = file;
    trends.push_back(tj);
  }
  summary["trends"] = trends;
  summary["extra"] = in.extra;
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace ctxpatch
