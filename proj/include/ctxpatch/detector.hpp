#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ctxpatch/image.hpp"
#include "ctxpatch/nn.hpp"
#include "json.hpp"

namespace ctxpatch {

struct Detection {
  BoundingBox bbox;
  double objectness = 0;
  std::vector<double> class_scores{1.0};  // single "plane" class
  Index cell = -1;                        // grid cell that produced it
};

/// Architecture of a grid detector: a conv backbone whose last layer is a
/// 5-channel head (objectness logit, x/y offsets, log width/height) on a
/// grid of stride `stride`.
struct ArchSpec {
  std::string name;
  int input_size = 256;
  double anchor = 32.0;
  std::vector<nn::ConvSpec> layers;

  int stride() const {
    int s = 1;
    for (const auto& l : layers) s *= l.stride;
    return s;
  }
  /// Index of a named feature layer; the head is not a feature layer.
  int layer_index(const std::string& layer) const;
  std::vector<std::string> feature_layers() const;
  std::uint64_t hash() const;
};

nlohmann::json to_json(const ArchSpec& a);

/// Registry of detector architectures resolvable by name.
class DetectorRegistry {
 public:
  static DetectorRegistry& instance();
  void add(ArchSpec spec);
  const ArchSpec& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  DetectorRegistry();
  std::map<std::string, ArchSpec> specs_;
};

/// Trained parameters, stored in double regardless of the compute scalar.
struct DetectorWeights {
  ArchSpec arch;
  std::vector<nn::ConvParams<double>> params;
  nlohmann::json metrics = nlohmann::json::object();

  std::uint64_t hash() const;
  /// Mean clean matched confidence on held-out data recorded at training time, if any.
  std::optional<double> gate_metric() const;
};

DetectorWeights init_weights(const ArchSpec& arch, std::uint64_t seed);
void save_weights(const std::filesystem::path& path, const DetectorWeights& w);
DetectorWeights load_weights(const std::filesystem::path& path);

template <typename Scalar>
struct DenseOutput {
  nn::Matrix<Scalar> head;  // 5 x cells
  Index grid_height = 0, grid_width = 0;
  int stride = 1;
  double anchor = 32;

  Index cells() const { return grid_height * grid_width; }
  double objectness(Index cell) const { return double(nn::sigmoid(head(0, cell))); }
  BoundingBox box(Index cell) const {
    const Index gx = cell % grid_width, gy = cell / grid_width;
    const double cx = (double(gx) + double(nn::sigmoid(head(1, cell)))) * stride;
    const double cy = (double(gy) + double(nn::sigmoid(head(2, cell)))) * stride;
    const double w = anchor * std::exp(std::clamp(double(head(3, cell)), -4.0, 4.0));
    const double h = anchor * std::exp(std::clamp(double(head(4, cell)), -4.0, 4.0));
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }
  Index cell_at(double x, double y) const {
    const Index gx = std::clamp<Index>(Index(std::floor(x / stride)), 0, grid_width - 1);
    const Index gy = std::clamp<Index>(Index(std::floor(y / stride)), 0, grid_height - 1);
    return gy * grid_width + gx;
  }
};

/// Greedy NMS: sorted by objectness (ties by cell), a detection survives when
/// its IoU with every surviving higher-ranked detection is <= iou_threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.objectness != b.objectness) return a.objectness > b.objectness;
    return a.cell < b.cell;
  });
  std::vector<Detection> kept;
  for (auto& d : dets) {
    bool keep = true;
    for (const auto& k : kept)
      if (iou(d.bbox, k.bbox) > iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(std::move(d));
  }
  return kept;
}

template <typename Scalar>
std::vector<Detection> decode(const DenseOutput<Scalar>& out, double conf_threshold) {
  std::vector<Detection> dets;
  for (Index c = 0; c < out.cells(); ++c) {
    const double obj = out.objectness(c);
    if (obj >= conf_threshold) dets.push_back({out.box(c), obj, {1.0}, c});
  }
  return dets;
}

struct TargetMatch {
  double confidence = 0.0;  // 0 when no detection matched
  int detection = -1;       // index into the detection list
};

/// Pairs each target with the best-scoring detection whose IoU >= iou_min.
inline std::vector<TargetMatch> match_detections(const std::vector<Detection>& dets,
                                                 const std::vector<BoundingBox>& targets, double iou_min) {
  std::vector<TargetMatch> out(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t)
    for (std::size_t d = 0; d < dets.size(); ++d)
      if (iou(dets[d].bbox, targets[t]) >= iou_min && dets[d].objectness > out[t].confidence) {
        out[t].confidence = dets[d].objectness;
        out[t].detection = int(d);
      }
  return out;
}

inline std::vector<BoundingBox> target_boxes(const Scene& scene) {
  std::vector<BoundingBox> boxes;
  for (const auto& t : scene.targets) boxes.push_back(t.bbox);
  return boxes;
}

/// Bilinear resize (pixel-center aligned, edge clamped).
template <typename Scalar>
Image<Scalar> resize_bilinear(const Image<Scalar>& img, Index height, Index width) {
  Image<Scalar> out(height, width);
  const double sy = double(img.height()) / double(height), sx = double(img.width()) / double(width);
  for (Index r = 0; r < height; ++r) {
    const double v = std::clamp((double(r) + 0.5) * sy - 0.5, 0.0, double(img.height() - 1));
    const Index y0 = Index(v), y1 = std::min(y0 + 1, img.height() - 1);
    const double ay = v - double(y0);
    for (Index c = 0; c < width; ++c) {
      const double u = std::clamp((double(c) + 0.5) * sx - 0.5, 0.0, double(img.width() - 1));
      const Index x0 = Index(u), x1 = std::min(x0 + 1, img.width() - 1);
      const double ax = u - double(x0);
      for (Index ch = 0; ch < 3; ++ch)
        out(r, c, ch) = Scalar((1 - ay) * ((1 - ax) * img(y0, x0, ch) + ax * img(y0, x1, ch)) +
                               ay * ((1 - ax) * img(y1, x0, ch) + ax * img(y1, x1, ch)));
    }
  }
  return out;
}

/// Grid detector over a conv backbone; the detector contract used by the
/// attack and evaluation code. Inference is const and thread-safe.
template <typename Scalar>
class ConvDetector {
 public:
  using Storage = typename Image<Scalar>::Storage;

  explicit ConvDetector(const DetectorWeights& w) : arch_(w.arch), hash_(w.hash()) {
    std::vector<nn::ConvParams<Scalar>> params;
    for (const auto& p : w.params)
      params.push_back({p.weight.template cast<Scalar>(), p.bias.template cast<Scalar>()});
    chain_ = nn::ConvChain<Scalar>(arch_.layers, std::move(params));
  }

  const ArchSpec& arch() const { return arch_; }
  std::uint64_t weights_hash() const { return hash_; }
  ImageDims input_dims() const { return {arch_.input_size, arch_.input_size}; }
  const nn::ConvChain<Scalar>& chain() const { return chain_; }

  /// Dense pre-NMS head output. The image must have the detector's input dims.
  DenseOutput<Scalar> forward(const Image<Scalar>& img, nn::ForwardCache<Scalar>* cache = nullptr) const {
    if (img.dims() != input_dims()) throw DimensionError("detector input dims mismatch");
    const nn::Shape in{3, img.height(), img.width()};
    DenseOutput<Scalar> out;
    out.head = chain_.forward(img.data().matrix(), in, cache);
    const nn::Shape last = [&] {
      nn::Shape s = in;
      for (const auto& l : arch_.layers) s = l.output(s);
      return s;
    }();
    out.grid_height = last.height;
    out.grid_width = last.width;
    out.stride = arch_.stride();
    out.anchor = arch_.anchor;
    return out;
  }

  /// Gradient w.r.t. the input image given the gradient w.r.t. the head.
  Storage input_gradient(const nn::ForwardCache<Scalar>& cache, const nn::Matrix<Scalar>& head_grad) const {
    return chain_.backward(cache, head_grad, true, false).input.array();
  }

  /// Sorted post-NMS detections; images of other sizes are resized to the
  /// input dims first and boxes mapped back to the original frame.
  std::vector<Detection> detect(const Image<Scalar>& img, double conf_threshold = 0.25,
                                double nms_iou = 0.5) const {
    if (img.dims() == input_dims()) return nms(decode(forward(img), conf_threshold), nms_iou);
    const auto resized = resize_bilinear(img, arch_.input_size, arch_.input_size);
    auto dets = nms(decode(forward(resized), conf_threshold), nms_iou);
    const double sx = double(img.width()) / arch_.input_size, sy = double(img.height()) / arch_.input_size;
    for (auto& d : dets) d.bbox = {d.bbox.x_min * sx, d.bbox.y_min * sy, d.bbox.x_max * sx, d.bbox.y_max * sy};
    return dets;
  }

 private:
  ArchSpec arch_;
  std::uint64_t hash_ = 0;
  nn::ConvChain<Scalar> chain_;
};

/// Per-pixel attention map in [0,1].
struct Heatmap {
  Index height = 0, width = 0;
  Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> data;
};

/// Grid cells whose objectness forms the Grad-CAM objective: for each target
/// the cell of its best matched detection, or the cell under its center.
template <typename Scalar>
std::vector<Index> objective_cells(const DenseOutput<Scalar>& out, const std::vector<BoundingBox>& targets,
                                   double conf_threshold, double nms_iou, double iou_min) {
  const auto dets = nms(decode(out, conf_threshold), nms_iou);
  const auto matches = match_detections(dets, targets, iou_min);
  std::vector<Index> cells;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Index c = matches[t].detection >= 0 ? dets[std::size_t(matches[t].detection)].cell
                                              : out.cell_at(targets[t].center_x(), targets[t].center_y());
    if (std::find(cells.begin(), cells.end(), c) == cells.end()) cells.push_back(c);
  }
  return cells;
}

/// Grad-CAM over `layer`: ReLU of the channel sum of feature maps weighted by
/// their spatially averaged gradients of the summed objectness of `cells`,
/// bilinearly upsampled to the image and max-normalized. An all-zero map is
/// returned when the gradient vanishes.
template <typename Scalar>
Heatmap gradcam(const ConvDetector<Scalar>& det, const Image<Scalar>& img, const std::string& layer,
                const std::vector<Index>& cells) {
  const int li = det.arch().layer_index(layer);
  nn::ForwardCache<Scalar> cache;
  const DenseOutput<Scalar> out = det.forward(img, &cache);
  nn::Matrix<Scalar> head_grad = nn::Matrix<Scalar>::Zero(out.head.rows(), out.head.cols());
  for (Index c : cells) {
    const Scalar s = nn::sigmoid(out.head(0, c));
    head_grad(0, c) += s * (Scalar(1) - s);
  }
  const auto grads = det.chain().backward(cache, head_grad, false, false, li);
  const nn::Shape shape = cache.shapes[std::size_t(li) + 1];
  const auto& feat = cache.out[std::size_t(li)];
  const Eigen::Matrix<double, Eigen::Dynamic, 1> alpha =
      grads.captured.template cast<double>().rowwise().mean();
  Eigen::Matrix<double, 1, Eigen::Dynamic> cam = alpha.transpose() * feat.template cast<double>();
  cam = cam.cwiseMax(0.0);

  Heatmap h{img.height(), img.width(), decltype(Heatmap::data)::Zero(img.height(), img.width())};
  const double max_cam = cam.size() ? cam.maxCoeff() : 0.0;
  if (!(max_cam > 0)) return h;
  const double sy = double(shape.height) / double(img.height()), sx = double(shape.width) / double(img.width());
  for (Index r = 0; r < img.height(); ++r) {
    const double v = std::clamp((double(r) + 0.5) * sy - 0.5, 0.0, double(shape.height - 1));
    const Index y0 = Index(v), y1 = std::min(y0 + 1, shape.height - 1);
    const double ay = v - double(y0);
    for (Index c = 0; c < img.width(); ++c) {
      const double u = std::clamp((double(c) + 0.5) * sx - 0.5, 0.0, double(shape.width - 1));
      const Index x0 = Index(u), x1 = std::min(x0 + 1, shape.width - 1);
      const double ax = u - double(x0);
      const auto at = [&](Index y, Index x) { return cam(y * shape.width + x); };
      h.data(r, c) = (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1));
    }
  }
  const double m = h.data.maxCoeff();
  if (m > 0) h.data /= m;
  return h;
}

}  // namespace ctxpatch
