#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ctxpatch/errors.hpp"

namespace ctxpatch {

using Index = Eigen::Index;

struct ImageDims {
  Index height = 0;
  Index width = 0;

  Index pixels() const { return height * width; }
  bool operator==(const ImageDims&) const = default;
};

/// Three-channel image stored channel-planar: `data()` is 3 x (height*width),
/// row `c` holds channel `c` in row-major pixel order.
template <typename Scalar>
class Image {
 public:
  using Storage = Eigen::Array<Scalar, 3, Eigen::Dynamic, Eigen::RowMajor>;

  Image() = default;
  Image(Index height, Index width, Scalar fill = Scalar(0))
      : height_(height), width_(width), data_(Storage::Constant(3, height * width, fill)) {
    if (height < 1 || width < 1) throw DimensionError("image must be at least 1x1");
  }
  Image(Index height, Index width, Storage data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (height < 1 || width < 1) throw DimensionError("image must be at least 1x1");
    if (data_.cols() != height * width) throw DimensionError("image data size does not match dims");
  }

  Index height() const { return height_; }
  Index width() const { return width_; }
  Index pixels() const { return height_ * width_; }
  ImageDims dims() const { return {height_, width_}; }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }

  Scalar& operator()(Index row, Index col, Index channel) { return data_(channel, row * width_ + col); }
  Scalar operator()(Index row, Index col, Index channel) const { return data_(channel, row * width_ + col); }

  bool in_unit_range() const {
    return data_.size() == 0 || (data_.minCoeff() >= Scalar(0) && data_.maxCoeff() <= Scalar(1));
  }

  void clamp_unit() { data_ = data_.max(Scalar(0)).min(Scalar(1)); }

  template <typename Other>
  Image<Other> cast() const {
    return Image<Other>(height_, width_, data_.template cast<Other>().eval());
  }

  bool operator==(const Image& o) const {
    return height_ == o.height_ && width_ == o.width_ && (data_ == o.data_).all();
  }

 private:
  Index height_ = 0;
  Index width_ = 0;
  Storage data_;
};

/// Single-channel mask, row-major flat storage.
template <typename Scalar>
class Mask {
 public:
  using Storage = Eigen::Array<Scalar, 1, Eigen::Dynamic>;

  Mask() = default;
  Mask(Index height, Index width, Scalar fill = Scalar(0))
      : height_(height), width_(width), data_(Storage::Constant(height * width, fill)) {}

  Index height() const { return height_; }
  Index width() const { return width_; }
  Index pixels() const { return height_ * width_; }
  ImageDims dims() const { return {height_, width_}; }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }

  Scalar& operator()(Index row, Index col) { return data_(row * width_ + col); }
  Scalar operator()(Index row, Index col) const { return data_(row * width_ + col); }

  /// Values >= 0.5 become 1, all others 0.
  Mask binarized() const {
    Mask out(height_, width_);
    out.data_ = (data_ >= Scalar(0.5)).template cast<Scalar>();
    return out;
  }

  template <typename Other>
  Mask<Other> cast() const {
    Mask<Other> out(height_, width_);
    out.data() = data_.template cast<Other>();
    return out;
  }

  bool operator==(const Mask& o) const {
    return height_ == o.height_ && width_ == o.width_ && (data_ == o.data_).all();
  }

 private:
  Index height_ = 0;
  Index width_ = 0;
  Storage data_;
};

/// Axis-aligned box in continuous pixel-edge coordinates: pixel (r, c) covers
/// [c, c+1) x [r, r+1). A pixel belongs to the box when its center does.
struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  bool contains_pixel(Index row, Index col) const {
    const double cx = double(col) + 0.5, cy = double(row) + 0.5;
    return cx >= x_min && cx < x_max && cy >= y_min && cy < y_max;
  }

  bool within(ImageDims dims) const {
    return x_min >= 0 && y_min >= 0 && x_max <= double(dims.width) && y_max <= double(dims.height);
  }

  /// Scaled about the center by `factor`.
  BoundingBox scaled(double factor) const {
    const double hw = 0.5 * width() * factor, hh = 0.5 * height() * factor;
    return {center_x() - hw, center_y() - hh, center_x() + hw, center_y() + hh};
  }

  BoundingBox clipped(ImageDims dims) const {
    return {std::clamp(x_min, 0.0, double(dims.width)), std::clamp(y_min, 0.0, double(dims.height)),
            std::clamp(x_max, 0.0, double(dims.width)), std::clamp(y_max, 0.0, double(dims.height))};
  }

  bool operator==(const BoundingBox&) const = default;
};

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Pixel-index rectangle [row0, row0+rows) x [col0, col0+cols).
struct Window {
  Index row0 = 0, col0 = 0, rows = 0, cols = 0;
  bool empty() const { return rows <= 0 || cols <= 0; }
  Index pixels() const { return rows * cols; }
};

/// Smallest window holding every pixel whose center lies inside `box`, clipped to `dims`.
inline Window pixel_window(const BoundingBox& box, ImageDims dims) {
  const auto first = [](double lo) { return Index(std::ceil(lo - 0.5)); };
  const auto last = [](double hi) { return Index(std::ceil(hi - 0.5)); };  // exclusive
  const Index c0 = std::max<Index>(0, first(box.x_min));
  const Index c1 = std::min<Index>(dims.width, last(box.x_max));
  const Index r0 = std::max<Index>(0, first(box.y_min));
  const Index r1 = std::min<Index>(dims.height, last(box.y_max));
  return {r0, c0, std::max<Index>(0, r1 - r0), std::max<Index>(0, c1 - c0)};
}

/// Bounding box of the nonzero (>= 0.5) pixels of a mask, if any.
template <typename Scalar>
bool mask_bbox(const Mask<Scalar>& mask, BoundingBox& out) {
  Index r0 = mask.height(), r1 = -1, c0 = mask.width(), c1 = -1;
  for (Index r = 0; r < mask.height(); ++r)
    for (Index c = 0; c < mask.width(); ++c)
      if (mask(r, c) >= Scalar(0.5)) {
        r0 = std::min(r0, r); r1 = std::max(r1, r);
        c0 = std::min(c0, c); c1 = std::max(c1, c);
      }
  if (r1 < 0) return false;
  out = {double(c0), double(r0), double(c1 + 1), double(r1 + 1)};
  return true;
}

/// One annotated target: its box, exact silhouette (scene-sized), and the
/// scale of the context ring around it.
struct TargetRegion {
  BoundingBox bbox;
  Mask<float> fg_mask;
  double context_scale = 1.8;
};

struct Scene {
  Image<float> image;
  std::vector<TargetRegion> targets;
  std::string scene_id;
};

/// Throws unless the scene satisfies its invariants (targets inside image, at least one target).
void validate_scene(const Scene& scene);

}  // namespace ctxpatch
