#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctxpatch/attack.hpp"
#include "ctxpatch/detector.hpp"
#include "ctxpatch/transforms.hpp"
#include "json.hpp"

namespace ctxpatch {

struct EvalConfig {
  int renders = 5;  // render 0 is untransformed, the rest perturbed
  TransformConfig render_transform;
  int max_targets = 18;  // 0 = every held-out target
  double conf_threshold = 0.25, nms_iou = 0.5, iou_min = 0.5;
  std::string gradcam_layer = "block3";
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const nlohmann::json& j);

struct ConfidenceRow {
  std::string detector;
  std::string attack;
  std::vector<double> cells;
  double avg = 0;
};

/// Rows are detector x attack, columns target ids then Avg.
struct ConfidenceTable {
  std::string name;
  std::vector<std::string> target_ids;
  std::vector<ConfidenceRow> rows;

  void add(ConfidenceRow row);
  const ConfidenceRow& row(const std::string& detector, const std::string& attack) const;
};

nlohmann::json to_json(const ConfidenceTable& t);
ConfidenceTable table_from_json(const nlohmann::json& j);

/// Fixed column order: detector, attack, target ids (ascending), Avg; six decimals.
std::string to_csv(const ConfidenceTable& t);

/// Held-out targets the table columns refer to, in scene order.
struct TargetRef {
  std::size_t scene = 0;
  std::size_t target = 0;
  std::string id;
};
std::vector<TargetRef> select_targets(const std::vector<Scene>& scenes, int max_targets);

struct EvalStats {
  std::size_t renders = 0;
  bool foreground_preserved = true;
};

/// Row of per-target confidences, each averaged over cfg.renders renders with
/// paired transforms. `patch` null gives the clean row; `zero_mask` composites
/// with an all-zero mask (a no-op patch).
ConfidenceRow evaluate(const ConvDetector<float>& det, const std::vector<Scene>& scenes, const PatchDesign* patch,
                       const EvalConfig& cfg, const std::string& attack_id, int workers = 1,
                       EvalStats* stats = nullptr, bool zero_mask = false);

/// Black-box row; rejects the detector the patch was optimized against.
ConfidenceRow transfer_evaluate(const PatchDesign& patch, const ConvDetector<float>& other,
                                const std::vector<Scene>& scenes, const EvalConfig& cfg,
                                const std::string& attack_id = "black-box", int workers = 1,
                                EvalStats* stats = nullptr);

/// Share of heatmap mass on M_bg among M_fg u M_bg; 0 when that mass is 0.
double attention_context_fraction(const Heatmap& heatmap, const TargetRegion& region,
                                  const Mask<float>* exclude = nullptr);

struct AttentionSample {
  std::string scene_id;
  std::size_t target = 0;
  double context_fraction = 0;
  Heatmap heatmap;
};

/// Grad-CAM per target on clean scenes (objective: that target's cell).
std::vector<AttentionSample> attention_analysis(const ConvDetector<float>& det, const std::vector<Scene>& scenes,
                                                const EvalConfig& cfg, int workers = 1);

struct TrendRow {
  double value = 0;
  double attacked_avg = 0;
  double clean_avg = 0;
  double final_tv = 0;
};

struct TrendReport {
  std::string parameter;
  std::string metric;  // which column the trend check reads
  std::vector<TrendRow> rows;
  bool non_increasing = true;
};

/// Sorts rows by value and checks `metric` ("attacked_avg" or "final_tv").
TrendReport make_trend(std::string parameter, std::vector<TrendRow> rows, std::string metric);
nlohmann::json to_json(const TrendReport& t);
std::string to_csv(const TrendReport& t);

struct NamedTrace {
  std::string name;
  TrainingTrace trace;
};

struct HeatmapOverlay {
  std::string name;
  Image<float> image;
  Heatmap heatmap;
};

struct ReportInputs {
  std::vector<ConfidenceTable> tables;
  std::vector<NamedTrace> traces;
  std::vector<HeatmapOverlay> heatmaps;
  std::vector<TrendReport> trends;
  nlohmann::json extra = nlohmann::json::object();
};

/// Writes <table>.csv, trend_<param>.csv, summary.json and plots/*.png under out_dir.
void emit_report(const ReportInputs& in, const std::filesystem::path& out_dir);

}  // namespace ctxpatch
