#include "ctxpatch/detector_train.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "ctxpatch/compositing.hpp"
#include "ctxpatch/parallel.hpp"

namespace ctxpatch {

double mean_matched_confidence(const ConvDetector<float>& det, const std::vector<Scene>& scenes,
                               double conf_threshold, double nms_iou, double iou_min, int workers) {
  std::vector<std::vector<TargetMatch>> per_scene(scenes.size());
  parallel_for(scenes.size(), workers, [&](std::size_t i) {
    per_scene[i] = match_detections(det.detect(scenes[i].image, conf_threshold, nms_iou), target_boxes(scenes[i]), iou_min);
  });
  double sum = 0;
  std::size_t n = 0;
  for (const auto& m : per_scene)
    for (const auto& t : m) {
      sum += t.confidence;
      ++n;
    }
  return n ? sum / double(n) : 0.0;
}

double detection_loss(const DenseOutput<float>& out, const std::vector<BoundingBox>& boxes, double box_weight,
                      nn::Matrix<float>& head_grad) {
  const Index cells = out.cells();
  head_grad.setZero(out.head.rows(), cells);
  std::vector<char> positive(std::size_t(cells), 0);
  std::vector<std::pair<Index, const BoundingBox*>> assigned;
  for (const auto& b : boxes) {
    const Index c = out.cell_at(b.center_x(), b.center_y());
    if (!positive[std::size_t(c)]) assigned.emplace_back(c, &b);
    positive[std::size_t(c)] = 1;
  }
  const double n_pos = double(assigned.size());
  const double n_neg = double(cells) - n_pos;
  double loss = 0;
  for (Index c = 0; c < cells; ++c) {
    const double z = out.head(0, c);
    const double y = positive[std::size_t(c)] ? 1.0 : 0.0;
    const double w = y > 0 ? 1.0 / n_pos : 1.0 / std::max(1.0, n_neg);
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    loss += w * (softplus - y * z);
    head_grad(0, c) = float(w * (nn::sigmoid(z) - y));
  }
  for (const auto& [c, b] : assigned) {
    const Index gx = c % out.grid_width, gy = c / out.grid_width;
    const double target[4] = {b->center_x() / out.stride - double(gx), b->center_y() / out.stride - double(gy),
                              std::log(b->width() / out.anchor), std::log(b->height() / out.anchor)};
    const double w = box_weight / n_pos;
    for (int k = 0; k < 4; ++k) {
      const double z = out.head(1 + k, c);
      const double pred = k < 2 ? nn::sigmoid(z) : z;
      const double d = pred - target[k];
      loss += w * std::abs(d);
      const double dpred = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      const double dz = k < 2 ? dpred * pred * (1 - pred) : dpred;
      head_grad(1 + k, c) = float(w * dz);
    }
  }
  return loss;
}

namespace {

struct Adam {
  std::vector<nn::ConvParams<float>> m, v;
  int step = 0;

  explicit Adam(const std::vector<nn::ConvParams<float>>& params) {
    for (const auto& p : params) {
      m.push_back({nn::Matrix<float>::Zero(p.weight.rows(), p.weight.cols()), nn::Vector<float>::Zero(p.bias.size())});
    }
    v = m;
  }

  void update(std::vector<nn::ConvParams<float>>& params, const std::vector<nn::ConvParams<float>>& grads, double lr) {
    ++step;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1 - std::pow(b1, step), c2 = 1 - std::pow(b2, step);
    const auto apply = [&](auto& p, const auto& g, auto& mm, auto& vv) {
      mm = b1 * mm.array() + (1 - b1) * g.array();
      vv = b2 * vv.array() + (1 - b2) * g.array().square();
      p.array() -= float(lr) * (mm.array() / float(c1)) / ((vv.array() / float(c2)).sqrt() + float(eps));
    };
    for (std::size_t l = 0; l < params.size(); ++l) {
      apply(params[l].weight, grads[l].weight, m[l].weight, v[l].weight);
      apply(params[l].bias, grads[l].bias, m[l].bias, v[l].bias);
    }
  }
};

Image<float> add_clutter(const Scene& scene, const DetectorRecipe& recipe, Rng& rng) {
  if (!recipe.augment || !(uniform(rng, 0.0, 1.0) < recipe.clutter_prob)) return scene.image;
  const int size = uniform_int(rng, 8, 64);
  const double lo = uniform(rng, 0.0, 0.5), hi = uniform(rng, lo + 0.1, 1.0);
  Image<float> canvas(size, size);
  for (Index i = 0; i < canvas.data().size(); ++i) canvas.data().data()[i] = float(uniform(rng, lo, hi));
  const double r = uniform(rng, recipe.clutter_scale_min, recipe.clutter_scale_max);
  return SceneCompositor<float>(scene, r, size, size).forward(canvas);
}

}  // namespace

TrainedDetector train_toy_detector(const ArchSpec& arch, const std::vector<Scene>& train,
                                   const std::vector<Scene>& heldout, const DetectorRecipe& recipe) {
  if (train.empty()) throw InvalidArgument("detector training needs a non-empty dataset");
  if (int(train.size()) < recipe.min_scenes)
    throw InvalidArgument("detector training needs at least " + std::to_string(recipe.min_scenes) + " scenes, got " +
                          std::to_string(train.size()));
  if (recipe.epochs < 1 || recipe.batch_size < 1 || !(recipe.learning_rate > 0))
    throw InvalidArgument("invalid detector recipe");
  for (const auto& s : train)
    if (s.image.dims() != ImageDims{arch.input_size, arch.input_size})
      throw DimensionError("training scene " + s.scene_id + " does not match detector input size");

  DetectorWeights init = init_weights(arch, derive_seed(recipe.seed, "init"));
  std::vector<nn::ConvParams<float>> params;
  for (const auto& p : init.params) params.push_back({p.weight.cast<float>(), p.bias.cast<float>()});
  Adam adam(params);

  TrainedDetector result;
  const std::size_t n = train.size();
  const int batches = int((n + std::size_t(recipe.batch_size) - 1) / std::size_t(recipe.batch_size));
  const int total_steps = recipe.epochs * batches;
  int step = 0;
  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = make_rng(recipe.seed, "shuffle", std::uint64_t(epoch));
    std::shuffle(order.begin(), order.end(), shuffle);
    double epoch_loss = 0;
    for (int b = 0; b < batches; ++b, ++step) {
      const std::size_t lo = std::size_t(b) * std::size_t(recipe.batch_size);
      const std::size_t hi = std::min(n, lo + std::size_t(recipe.batch_size));
      const nn::ConvChain<float> chain(arch.layers, params);
      std::vector<std::vector<nn::ConvParams<float>>> slot_grads(hi - lo);
      std::vector<double> slot_loss(hi - lo, 0.0);
      parallel_for(hi - lo, recipe.workers, [&](std::size_t k) {
        const std::size_t idx = order[lo + k];
        const Scene& scene = train[idx];
        Rng rng = make_rng(recipe.seed, "augment", std::uint64_t(epoch) * 1000003ull + idx);
        Transform t;
        if (recipe.augment && uniform(rng, 0.0, 1.0) < recipe.augment_prob) t = sample_transform(recipe.augmentation, rng);
        TransformPass<float> pass(scene.image.dims(), t);
        const Image<float> x = pass.forward(add_clutter(scene, recipe, rng));
        std::vector<BoundingBox> boxes;
        for (const auto& target : scene.targets)
          if (auto box = transformed_target_box(pass, target)) boxes.push_back(*box);
        nn::ForwardCache<float> cache;
        DenseOutput<float> out;
        out.head = chain.forward(x.data().matrix(), {3, x.height(), x.width()}, &cache);
        const nn::Shape last = cache.shapes.back();
        out.grid_height = last.height;
        out.grid_width = last.width;
        out.stride = arch.stride();
        out.anchor = arch.anchor;
        nn::Matrix<float> head_grad;
        slot_loss[k] = detection_loss(out, boxes, recipe.box_weight, head_grad);
        slot_grads[k] = chain.backward(cache, head_grad, false, true).params;
      });
      std::vector<nn::ConvParams<float>> grads = slot_grads[0];
      for (std::size_t k = 1; k < slot_grads.size(); ++k)
        for (std::size_t l = 0; l < grads.size(); ++l) {
          grads[l].weight += slot_grads[k][l].weight;
          grads[l].bias += slot_grads[k][l].bias;
        }
      const float inv = 1.0f / float(hi - lo);
      for (auto& g : grads) {
        g.weight *= inv;
        g.bias *= inv;
      }
      for (double l : slot_loss) epoch_loss += l;
      const double progress = double(step) / double(std::max(1, total_steps - 1));
      const double lr = recipe.learning_rate *
                        (recipe.final_lr_fraction + (1 - recipe.final_lr_fraction) * 0.5 * (1 + std::cos(std::numbers::pi * progress)));
      adam.update(params, grads, lr);
    }
    epoch_loss /= double(n);
    if (!std::isfinite(epoch_loss)) throw NumericError("detector loss diverged at epoch " + std::to_string(epoch));
    result.epoch_losses.push_back(epoch_loss);
  }

  result.weights.arch = arch;
  for (const auto& p : params) result.weights.params.push_back({p.weight.cast<double>(), p.bias.cast<double>()});
  result.final_loss = result.epoch_losses.back();
  const ConvDetector<float> det(result.weights);
  result.heldout_confidence = mean_matched_confidence(det, heldout.empty() ? train : heldout, recipe.conf_threshold,
                                                      recipe.nms_iou, recipe.iou_min, recipe.workers);
  result.weights.metrics = {{"heldout_confidence", result.heldout_confidence},
                            {"final_loss", result.final_loss},
                            {"epochs", recipe.epochs},
                            {"train_scenes", train.size()},
                            {"heldout_scenes", heldout.size()}};
  if (result.heldout_confidence < recipe.gate)
    throw UnderTrainedError("detector under-trained: held-out confidence " + std::to_string(result.heldout_confidence) +
                                " < gate " + std::to_string(recipe.gate),
                            result.heldout_confidence);
  return result;
}

}  // namespace ctxpatch
