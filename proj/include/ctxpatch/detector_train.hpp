#pragma once

#include <cstdint>
#include <vector>

#include "ctxpatch/detector.hpp"
#include "ctxpatch/transforms.hpp"

namespace ctxpatch {

struct DetectorRecipe {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 3e-3;
  double final_lr_fraction = 0.1;  // cosine decay floor
  double box_weight = 1.0;
  bool augment = true;
  double augment_prob = 0.8;
  TransformConfig augmentation;
  // random canvases composited into target context rings
  double clutter_prob = 0.5;
  double clutter_scale_min = 1.2, clutter_scale_max = 2.0;
  int min_scenes = 50;
  double gate = 0.8;
  double conf_threshold = 0.25, nms_iou = 0.5, iou_min = 0.5;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct TrainedDetector {
  DetectorWeights weights;
  std::vector<double> epoch_losses;
  double final_loss = 0;
  double heldout_confidence = 0;
};

/// Mean over all targets of the matched confidence (0 when missed) on untouched scenes.
double mean_matched_confidence(const ConvDetector<float>& det, const std::vector<Scene>& scenes,
                               double conf_threshold, double nms_iou, double iou_min, int workers = 1);

/// Trains a registered architecture with BCE on cell objectness and L1 on
/// box offsets (Adam). Throws UnderTrainedError when the held-out confidence
/// stays below recipe.gate.
TrainedDetector train_toy_detector(const ArchSpec& arch, const std::vector<Scene>& train,
                                   const std::vector<Scene>& heldout, const DetectorRecipe& recipe);

/// Loss and head gradient of one image against its target boxes.
double detection_loss(const DenseOutput<float>& out, const std::vector<BoundingBox>& boxes, double box_weight,
                      nn::Matrix<float>& head_grad);

}  // namespace ctxpatch
