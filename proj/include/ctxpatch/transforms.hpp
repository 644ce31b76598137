#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "ctxpatch/image.hpp"
#include "ctxpatch/rng.hpp"
#include "json.hpp"

namespace ctxpatch {

/// Where the robustness transform is applied during patch training.
enum class TransformScope { Scene, Patch };

struct TransformConfig {
  double scale_min = 0.7, scale_max = 1.3;
  double rotation_deg = 15.0;  // symmetric range
  double brightness = 0.15;    // symmetric additive range
  double contrast_min = 0.8, contrast_max = 1.2;
  double noise_sigma = 0.02;
  bool scale_enabled = true, rotation_enabled = true, brightness_enabled = true;
  bool contrast_enabled = true, noise_enabled = true;
  TransformScope scope = TransformScope::Scene;
  std::uint64_t seed = 0;  // mixed into the caller's stream

  static TransformConfig disabled() {
    TransformConfig c;
    c.scale_enabled = c.rotation_enabled = c.brightness_enabled = c.contrast_enabled = c.noise_enabled = false;
    return c;
  }
  bool any_enabled() const {
    return scale_enabled || rotation_enabled || brightness_enabled || contrast_enabled || noise_enabled;
  }
  void validate() const;
};

/// Sampled parameters of one transform. Noise is regenerated from `noise_seed`.
struct Transform {
  double scale = 1.0;
  double rotation_deg = 0.0;
  double brightness = 0.0;
  double contrast = 1.0;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;

  bool geometric() const { return scale != 1.0 || rotation_deg != 0.0; }
  bool photometric() const { return brightness != 0.0 || contrast != 1.0 || noise_sigma != 0.0; }
  bool identity() const { return !geometric() && !photometric(); }
  bool operator==(const Transform&) const = default;
};

inline Transform sample_transform(const TransformConfig& c, Rng& rng) {
  Transform t;
  // Draw every parameter regardless of flags so enabling one does not shift the others.
  const double scale = uniform(rng, c.scale_min, c.scale_max);
  const double rot = uniform(rng, -c.rotation_deg, c.rotation_deg);
  const double bright = uniform(rng, -c.brightness, c.brightness);
  const double contrast = uniform(rng, c.contrast_min, c.contrast_max);
  const std::uint64_t noise_seed = rng();
  if (c.scale_enabled) t.scale = scale;
  if (c.rotation_enabled) t.rotation_deg = rot;
  if (c.brightness_enabled) t.brightness = bright;
  if (c.contrast_enabled) t.contrast = contrast;
  if (c.noise_enabled && c.noise_sigma > 0) {
    t.noise_sigma = c.noise_sigma;
    t.noise_seed = noise_seed;
  }
  return t;
}

/// Bilinear sampling taps realizing the inverse geometric map of a transform:
/// each output pixel reads four source pixels; taps outside the image read a
/// constant fill value instead.
struct WarpTaps {
  static constexpr double kFill = 0.5;
  ImageDims dims;
  std::vector<std::array<Index, 4>> index;  // -1 marks the fill value
  std::vector<std::array<double, 4>> weight;

  WarpTaps(ImageDims d, const Transform& t) : dims(d) {
    const Index n = d.pixels();
    index.resize(std::size_t(n));
    weight.resize(std::size_t(n));
    const double theta = t.rotation_deg * std::numbers::pi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double cx = 0.5 * double(d.width), cy = 0.5 * double(d.height);
    for (Index r = 0; r < d.height; ++r)
      for (Index c = 0; c < d.width; ++c) {
        const double dx = (double(c) + 0.5 - cx) / t.scale, dy = (double(r) + 0.5 - cy) / t.scale;
        // inverse rotation
        const double sx = ct * dx + st * dy + cx - 0.5;
        const double sy = -st * dx + ct * dy + cy - 0.5;
        const double fx = std::floor(sx), fy = std::floor(sy);
        const Index x0 = Index(fx), y0 = Index(fy);
        const double ax = sx - fx, ay = sy - fy;
        const auto at = [&](Index y, Index x) -> Index {
          return (x < 0 || y < 0 || x >= d.width || y >= d.height) ? -1 : y * d.width + x;
        };
        const auto k = std::size_t(r * d.width + c);
        index[k] = {at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)};
        weight[k] = {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax};
      }
  }

  template <typename Src, typename Dst>
  void apply(const Src& src, Dst& dst) const {
    using S = std::decay_t<decltype(src(0))>;
    for (std::size_t k = 0; k < index.size(); ++k) {
      S v(0);
      for (int t = 0; t < 4; ++t) v += S(weight[k][t]) * (index[k][t] < 0 ? S(kFill) : src(index[k][t]));
      dst(Index(k)) = v;
    }
  }

  template <typename Row, typename Out>
  void adjoint(const Row& grad, Out& src_grad) const {
    using S = std::decay_t<decltype(grad(0))>;
    for (std::size_t k = 0; k < index.size(); ++k) {
      const S g = grad(Index(k));
      if (g == S(0)) continue;
      for (int t = 0; t < 4; ++t)
        if (index[k][t] >= 0) src_grad(index[k][t]) += S(weight[k][t]) * g;
    }
  }
};

/// One application of a Transform with its backward pass.
/// Output = clamp((warp(x) - 0.5) * contrast + 0.5 + brightness + noise, 0, 1).
template <typename Scalar>
class TransformPass {
 public:
  using Storage = typename Image<Scalar>::Storage;

  TransformPass(ImageDims dims, const Transform& t) : dims_(dims), t_(t) {
    if (t.geometric()) warp_.emplace(dims, t);
    if (t.noise_sigma > 0) {
      Rng rng(t.noise_seed);
      std::normal_distribution<double> n(0.0, t.noise_sigma);
      noise_.resize(3, dims.pixels());
      for (Index i = 0; i < noise_.size(); ++i) noise_.data()[i] = Scalar(n(rng));
    }
  }

  const Transform& transform() const { return t_; }

  Image<Scalar> forward(const Image<Scalar>& in) {
    if (in.dims() != dims_) throw DimensionError("transform dims mismatch");
    if (t_.identity()) return in;
    Storage v = in.data();
    if (warp_)
      for (Index ch = 0; ch < 3; ++ch) {
        auto dst = v.row(ch);
        warp_->apply(in.data().row(ch), dst);
      }
    if (!t_.photometric()) return Image<Scalar>(dims_.height, dims_.width, std::move(v));
    v = (v - Scalar(0.5)) * Scalar(t_.contrast) + Scalar(0.5) + Scalar(t_.brightness);
    if (noise_.size() > 0) v += noise_;
    pass_ = (v >= Scalar(0)) && (v <= Scalar(1));
    return Image<Scalar>(dims_.height, dims_.width, v.max(Scalar(0)).min(Scalar(1)).eval());
  }

  /// Gradient with respect to the input of the last forward() call.
  Storage backward(const Storage& grad_out) const {
    if (t_.identity()) return grad_out;
    Storage g = grad_out;
    if (pass_.size() > 0) g = pass_.select(g * Scalar(t_.contrast), Scalar(0));
    if (!warp_) return g;
    Storage out = Storage::Zero(3, dims_.pixels());
    for (Index ch = 0; ch < 3; ++ch) {
      auto dst = out.row(ch);
      warp_->adjoint(g.row(ch), dst);
    }
    return out;
  }

  /// Geometric part only, applied to a mask (fill value 0).
  Mask<float> warp_mask(const Mask<float>& m) const {
    if (!warp_) return m;
    Mask<float> out(m.height(), m.width());
    for (std::size_t k = 0; k < warp_->index.size(); ++k) {
      double v = 0;
      for (int t = 0; t < 4; ++t)
        if (warp_->index[k][t] >= 0) v += warp_->weight[k][t] * m.data()(warp_->index[k][t]);
      out.data()(Index(k)) = float(v);
    }
    return out;
  }

 private:
  ImageDims dims_;
  Transform t_;
  std::optional<WarpTaps> warp_;
  Storage noise_;
  Eigen::Array<bool, 3, Eigen::Dynamic, Eigen::RowMajor> pass_;
};

template <typename Scalar>
Image<Scalar> apply_transform(const Image<Scalar>& image, const Transform& t) {
  TransformPass<Scalar> pass(image.dims(), t);
  return pass.forward(image);
}

/// Box of a target after the geometric part of `t`, taken from its warped
/// silhouette. Empty when less than `min_visible` of the expected area stays in frame.
template <typename Scalar>
std::optional<BoundingBox> transformed_target_box(const TransformPass<Scalar>& pass, const TargetRegion& target,
                                                  double min_visible = 0.5) {
  if (!pass.transform().geometric()) return target.bbox;
  const Mask<float> warped = pass.warp_mask(target.fg_mask);
  BoundingBox box;
  if (!mask_bbox(warped, box)) return std::nullopt;
  const double expected = target.fg_mask.data().sum() * pass.transform().scale * pass.transform().scale;
  const double visible = (warped.data() >= 0.5f).count();
  if (expected <= 0 || visible < min_visible * expected) return std::nullopt;
  return box;
}

nlohmann::json to_json(const TransformConfig& c);
TransformConfig transform_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Transform& t);

}  // namespace ctxpatch
