#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctxpatch/compositing.hpp"
#include "ctxpatch/detector.hpp"
#include "ctxpatch/losses.hpp"
#include "ctxpatch/parallel.hpp"
#include "ctxpatch/transforms.hpp"
#include "json.hpp"

namespace ctxpatch {

enum class Optimizer { PlainGradient, Momentum, AdaptiveMoments };

/// Which detections feed the adversary loss.
enum class LossMode {
  PostNms,  // post-NMS detections matched to a target
  Dense,    // per target, the strongest pre-NMS cell whose center lies in its box
};

struct EarlyStopConfig {
  int patience = 0;  // 0 disables
  double min_delta = 0.005;
  int eval_every = 50;
};

struct AttackConfig {
  int iterations = 1000;
  double step_size = 0.01;
  Optimizer optimizer = Optimizer::AdaptiveMoments;
  double lambda = 1e-4;
  int batch_size = 8;
  double context_scale = 1.8;
  int canvas_size = 64;
  TransformConfig transform;
  LossMode loss_mode = LossMode::PostNms;
  double conf_threshold = 0.25, nms_iou = 0.5, iou_min = 0.5;
  int checkpoint_every = 0;  // 0 disables
  EarlyStopConfig early_stop;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const AttackConfig& c);
AttackConfig attack_config_from_json(const nlohmann::json& j);
std::string to_string(Optimizer o);
std::string to_string(LossMode m);

/// The learned, printable patch design shared by all targets.
struct PatchDesign {
  Image<float> canvas;
  double context_scale = 1.8;
  std::string proxy;              // detector the patch was optimized against
  std::uint64_t proxy_hash = 0;   // its weights hash
};

Image<float> init_canvas(int canvas_size, Rng& rng);

struct TrainingStep {
  int iteration = 0;
  LossBreakdown loss;
  double tv_exact = 0;
  double mean_confidence = 0;
  double wall_seconds = 0;
  int foreground_checked = 0;
};

struct TrainingTrace {
  std::vector<TrainingStep> steps;
  std::vector<double> evaluations;  // early-stop evaluations
  int early_stop_at = -1;           // iteration count when stopped early
  std::string canvas_checksum;
};

nlohmann::json to_json(const TrainingTrace& t);
TrainingTrace trace_from_json(const nlohmann::json& j);

struct EarlyStopDecision {
  bool stop = false;
  int at_evaluation = -1;  // 1-based
};

/// Stops once `patience` consecutive evaluations fail to improve the best
/// value (lower is better) by more than `min_delta`.
EarlyStopDecision early_stop(const std::vector<double>& evaluations, int patience, double min_delta);

std::string canvas_checksum(const Image<float>& canvas);

struct BatchItem {
  std::size_t scene = 0;
  Transform transform;
};

/// Loss L = L_adv + lambda * L_tv of one batch and its gradient with respect
/// to the canvas: canvas -> (patch transform) -> per-target contextual patch
/// -> composed scene -> (scene transform) -> detector objectness.
template <typename Scalar>
class PatchObjective {
 public:
  using Storage = typename Image<Scalar>::Storage;

  struct Result {
    LossBreakdown loss;
    double tv_exact = 0;
    Storage grad;
    double mean_confidence = 0;  // mean matched confidence over visible targets
    bool foreground_preserved = true;
    int composites = 0;          // composited images checked for foreground preservation
  };

  PatchObjective(const ConvDetector<Scalar>& detector, const std::vector<SceneCompositor<Scalar>>& compositors,
                 const std::vector<const Scene*>& scenes, const AttackConfig& config)
      : det_(detector), comps_(compositors), scenes_(scenes), cfg_(config) {}

  Result evaluate(const Image<Scalar>& canvas, const std::vector<BatchItem>& batch, int workers = 1,
                  bool need_grad = true) const {
    std::vector<Item> items(batch.size());
    parallel_for(batch.size(), workers, [&](std::size_t i) { items[i] = run_item(canvas, batch[i], need_grad); });
    Result r;
    r.grad = Storage::Zero(3, canvas.pixels());
    double obj_sum = 0, conf_sum = 0;
    int n = 0, n_conf = 0;
    for (const auto& it : items) {
      obj_sum += it.obj_sum;
      n += it.count;
      conf_sum += it.conf_sum;
      n_conf += it.conf_count;
      r.foreground_preserved = r.foreground_preserved && it.fg_ok;
      ++r.composites;
      if (need_grad && it.grad.size() > 0) r.grad += it.grad;
    }
    const double adv = n > 0 ? obj_sum / n : 0.0;
    if (n > 0) r.grad /= Scalar(n);
    const double tv = tv_loss(canvas, kTvEpsilon);
    r.tv_exact = tv_loss(canvas, 0.0);
    r.loss = total_loss(adv, tv, cfg_.lambda, n);
    if (need_grad && cfg_.lambda > 0) r.grad += Scalar(cfg_.lambda) * tv_gradient(canvas, kTvEpsilon);
    r.mean_confidence = n_conf > 0 ? conf_sum / n_conf : 0.0;
    return r;
  }

  /// Composited scene (before any transform) for one batch item.
  Image<Scalar> composite(const Image<Scalar>& canvas, const BatchItem& item) const {
    return comps_[item.scene].forward(patch_canvas(canvas, item.transform, nullptr));
  }

 private:
  struct Item {
    double obj_sum = 0;
    int count = 0;
    double conf_sum = 0;
    int conf_count = 0;
    bool fg_ok = true;
    Storage grad;
  };

  Image<Scalar> patch_canvas(const Image<Scalar>& canvas, const Transform& t,
                             std::optional<TransformPass<Scalar>>* keep) const {
    if (cfg_.transform.scope != TransformScope::Patch || t.identity()) return canvas;
    TransformPass<Scalar> pass(canvas.dims(), t);
    Image<Scalar> out = pass.forward(canvas);
    if (keep) keep->emplace(std::move(pass));
    return out;
  }

  Item run_item(const Image<Scalar>& canvas, const BatchItem& b, bool need_grad) const {
    Item it;
    const auto& comp = comps_[b.scene];
    const Scene& scene = *scenes_[b.scene];
    const bool scene_scope = cfg_.transform.scope == TransformScope::Scene;

    std::optional<TransformPass<Scalar>> canvas_pass;
    const Image<Scalar> placed_canvas = patch_canvas(canvas, b.transform, &canvas_pass);
    const Image<Scalar> composed = comp.forward(placed_canvas);
    it.fg_ok = foreground_preserved(comp.clean(), composed, comp.foreground());

    TransformPass<Scalar> scene_pass(composed.dims(), scene_scope ? b.transform : Transform{});
    const Image<Scalar> observed = scene_pass.forward(composed);
    std::vector<BoundingBox> boxes;
    for (const auto& t : scene.targets)
      if (auto box = transformed_target_box(scene_pass, t)) boxes.push_back(*box);

    nn::ForwardCache<Scalar> cache;
    const DenseOutput<Scalar> out = det_.forward(observed, need_grad ? &cache : nullptr);
    const auto dets = nms(decode(out, cfg_.conf_threshold), cfg_.nms_iou);
    for (const auto& m : match_detections(dets, boxes, cfg_.iou_min)) {
      it.conf_sum += m.confidence;
      ++it.conf_count;
    }

    std::vector<Index> cells;
    if (cfg_.loss_mode == LossMode::PostNms) {
      for (const auto& d : dets)
        for (const auto& box : boxes)
          if (iou(d.bbox, box) >= cfg_.iou_min) {
            cells.push_back(d.cell);
            break;
          }
    } else {
      for (const auto& box : boxes) {
        Index best = out.cell_at(box.center_x(), box.center_y());
        for (Index c = 0; c < out.cells(); ++c) {
          const double cx = (double(c % out.grid_width) + 0.5) * out.stride;
          const double cy = (double(c / out.grid_width) + 0.5) * out.stride;
          if (cx >= box.x_min && cx < box.x_max && cy >= box.y_min && cy < box.y_max &&
              out.head(0, c) > out.head(0, best))
            best = c;
        }
        cells.push_back(best);
      }
    }
    if (cells.empty()) return it;

    nn::Matrix<Scalar> head_grad = nn::Matrix<Scalar>::Zero(out.head.rows(), out.head.cols());
    for (Index c : cells) {
      const Scalar s = nn::sigmoid(out.head(0, c));
      it.obj_sum += double(s);
      ++it.count;
      head_grad(0, c) += s * (Scalar(1) - s);
    }
    if (!need_grad) return it;
    const Storage g_observed = det_.input_gradient(cache, head_grad);
    const Storage g_composed = scene_pass.backward(g_observed);
    Storage g_canvas = comp.backward(g_composed, placed_canvas.height(), placed_canvas.width());
    if (canvas_pass) g_canvas = canvas_pass->backward(g_canvas);
    it.grad = std::move(g_canvas);
    return it;
  }

  const ConvDetector<Scalar>& det_;
  const std::vector<SceneCompositor<Scalar>>& comps_;
  std::vector<const Scene*> scenes_;
  AttackConfig cfg_;
};

/// Batch of one training iteration: scenes drawn uniformly with replacement
/// and one sampled transform each, all from the iteration's own stream.
std::vector<BatchItem> sample_batch(const AttackConfig& config, std::size_t scene_count, int iteration);

struct TrainOptions {
  int workers = 1;
  std::optional<std::filesystem::path> checkpoint_dir;
  bool resume = false;
  bool require_gate = true;
  double gate = 0.8;
  std::string config_hash;
  std::function<void(const TrainingStep&)> on_step;
};

struct PatchResult {
  PatchDesign patch;
  TrainingTrace trace;
};

/// Optimizes the shared canvas against `detector`; only the canvas is updated.
PatchResult train_patch(const std::vector<Scene>& dataset, const DetectorWeights& detector,
                        const AttackConfig& config, const TrainOptions& options = {});

void save_patch(const std::filesystem::path& dir, const PatchDesign& patch, const nlohmann::json& extra = {});
PatchDesign load_patch(const std::filesystem::path& dir);

}  // namespace ctxpatch
