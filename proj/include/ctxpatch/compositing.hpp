#pragma once

#include <array>
#include <vector>

#include "ctxpatch/image.hpp"

namespace ctxpatch {

template <typename Scalar>
struct MaskPair {
  Mask<Scalar> fg;  // target silhouette
  Mask<Scalar> bg;  // context ring: scaled bbox minus every silhouette

  /// M = fg + bg; binary because fg and bg are disjoint.
  Mask<Scalar> combined() const {
    Mask<Scalar> m(fg.height(), fg.width());
    m.data() = fg.data() + bg.data();
    return m;
  }
};

inline void check_region(const TargetRegion& region, ImageDims dims) {
  if (!region.bbox.valid()) throw BoundsError("target bbox is degenerate");
  if (!region.bbox.within(dims)) throw BoundsError("target bbox lies outside the image");
  if (!(region.context_scale >= 1.0)) throw InvalidArgument("context_scale must be >= 1");
  if (region.fg_mask.dims() != dims) throw DimensionError("fg_mask dims do not match image dims");
}

/// Foreground and context-ring masks of one target. The ring is the bbox
/// scaled by `context_scale` about its center, clipped to the image, with the
/// target silhouette removed. Pixels set in `exclude` (typically the union of
/// all silhouettes in the scene) are also removed from the ring.
template <typename Scalar>
MaskPair<Scalar> extract_masks(const TargetRegion& region, ImageDims dims,
                               const Mask<float>* exclude = nullptr) {
  check_region(region, dims);
  if (exclude && exclude->dims() != dims) throw DimensionError("exclusion mask dims mismatch");
  MaskPair<Scalar> out{region.fg_mask.binarized().template cast<Scalar>(), Mask<Scalar>(dims.height, dims.width)};
  const BoundingBox ring = region.bbox.scaled(region.context_scale);
  const Window w = pixel_window(ring, dims);
  for (Index r = w.row0; r < w.row0 + w.rows; ++r)
    for (Index c = w.col0; c < w.col0 + w.cols; ++c) {
      if (!ring.contains_pixel(r, c) || out.fg(r, c) != Scalar(0)) continue;
      if (exclude && (*exclude)(r, c) >= 0.5f) continue;
      out.bg(r, c) = Scalar(1);
    }
  return out;
}

namespace detail {
template <typename A, typename B>
void require_same_dims(const A& a, const B& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) throw DimensionError(what);
}

template <typename Scalar>
auto broadcast(const Mask<Scalar>& m) {
  return m.data().replicate(3, 1);
}
}  // namespace detail

/// P^c = T (.) M_fg + P (.) M_bg.
template <typename Scalar>
Image<Scalar> build_contextual_patch(const Image<Scalar>& target, const Mask<Scalar>& fg,
                                     const Mask<Scalar>& bg, const Image<Scalar>& canvas) {
  detail::require_same_dims(target, fg, "build_contextual_patch: target/fg mismatch");
  detail::require_same_dims(target, bg, "build_contextual_patch: target/bg mismatch");
  detail::require_same_dims(target, canvas, "build_contextual_patch: target/canvas mismatch");
  typename Image<Scalar>::Storage out =
      target.data() * detail::broadcast(fg) + canvas.data() * detail::broadcast(bg);
  return Image<Scalar>(target.height(), target.width(), std::move(out));
}

/// x* = (1 - M) (.) x + M (.) P^c.
template <typename Scalar>
Image<Scalar> compose_adversarial(const Image<Scalar>& clean, const Image<Scalar>& contextual,
                                  const Mask<Scalar>& mask) {
  detail::require_same_dims(clean, contextual, "compose_adversarial: image/patch mismatch");
  detail::require_same_dims(clean, mask, "compose_adversarial: image/mask mismatch");
  const auto m = detail::broadcast(mask);
  typename Image<Scalar>::Storage out = (Scalar(1) - m) * clean.data() + m * contextual.data();
  return Image<Scalar>(clean.height(), clean.width(), std::move(out));
}

template <typename Scalar>
Image<Scalar> crop(const Image<Scalar>& img, const Window& w) {
  Image<Scalar> out(w.rows, w.cols);
  for (Index ch = 0; ch < 3; ++ch)
    for (Index r = 0; r < w.rows; ++r)
      out.data().row(ch).segment(r * w.cols, w.cols) =
          img.data().row(ch).segment((w.row0 + r) * img.width() + w.col0, w.cols);
  return out;
}

template <typename Scalar>
Mask<Scalar> crop(const Mask<Scalar>& m, const Window& w) {
  Mask<Scalar> out(w.rows, w.cols);
  for (Index r = 0; r < w.rows; ++r)
    out.data().segment(r * w.cols, w.cols) = m.data().segment((w.row0 + r) * m.width() + w.col0, w.cols);
  return out;
}

template <typename Scalar>
void paste(Image<Scalar>& dst, const Window& w, const Image<Scalar>& src) {
  for (Index ch = 0; ch < 3; ++ch)
    for (Index r = 0; r < w.rows; ++r)
      dst.data().row(ch).segment((w.row0 + r) * dst.width() + w.col0, w.cols) =
          src.data().row(ch).segment(r * w.cols, w.cols);
}

/// Bilinear taps mapping a canvas onto the pixels of `window`, with the
/// canvas stretched over `box` (which may extend past the window).
/// Sampling coordinates clamp to the canvas edge.
struct ResampleTaps {
  Index canvas_height = 0, canvas_width = 0;
  Window window;
  std::vector<std::array<Index, 4>> index;  // flat canvas pixel indices
  std::vector<std::array<double, 4>> weight;

  ResampleTaps() = default;
  ResampleTaps(Index canvas_h, Index canvas_w, const BoundingBox& box, const Window& win)
      : canvas_height(canvas_h), canvas_width(canvas_w), window(win) {
    index.resize(std::size_t(win.pixels()));
    weight.resize(std::size_t(win.pixels()));
    const auto axis = [](double pos, double lo, double len, Index n, Index& i0, Index& i1, double& a) {
      double u = (pos - lo) / len * double(n) - 0.5;
      u = std::clamp(u, 0.0, double(n - 1));
      i0 = Index(std::floor(u));
      i1 = std::min(i0 + 1, n - 1);
      a = u - double(i0);
    };
    for (Index r = 0; r < win.rows; ++r)
      for (Index c = 0; c < win.cols; ++c) {
        Index x0, x1, y0, y1;
        double ax, ay;
        axis(double(win.col0 + c) + 0.5, box.x_min, box.width(), canvas_w, x0, x1, ax);
        axis(double(win.row0 + r) + 0.5, box.y_min, box.height(), canvas_h, y0, y1, ay);
        const auto k = std::size_t(r * win.cols + c);
        index[k] = {y0 * canvas_w + x0, y0 * canvas_w + x1, y1 * canvas_w + x0, y1 * canvas_w + x1};
        weight[k] = {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax};
      }
  }

  template <typename Scalar>
  Image<Scalar> apply(const Image<Scalar>& canvas) const {
    Image<Scalar> out(window.rows, window.cols);
    for (Index ch = 0; ch < 3; ++ch) {
      const auto src = canvas.data().row(ch);
      auto dst = out.data().row(ch);
      for (std::size_t k = 0; k < index.size(); ++k) {
        const auto& i = index[k];
        const auto& w = weight[k];
        dst(Index(k)) = Scalar(w[0]) * src(i[0]) + Scalar(w[1]) * src(i[1]) + Scalar(w[2]) * src(i[2]) +
                        Scalar(w[3]) * src(i[3]);
      }
    }
    return out;
  }

  /// Adds the adjoint of `apply` applied to `grad` (window-sized, 3 x pixels) into `canvas_grad`.
  template <typename Scalar, typename Grad, typename Out>
  void accumulate_adjoint(const Grad& grad, Out& canvas_grad) const {
    for (Index ch = 0; ch < 3; ++ch)
      for (std::size_t k = 0; k < index.size(); ++k) {
        const Scalar g = grad(ch, Index(k));
        if (g == Scalar(0)) continue;
        const auto& i = index[k];
        const auto& w = weight[k];
        for (int t = 0; t < 4; ++t) canvas_grad(ch, i[t]) += Scalar(w[t]) * g;
      }
  }
};

/// One target's instantiation of the shared canvas: the canvas resampled
/// onto the scaled bbox, the foreground F = T (.) M_fg taken from the scene,
/// and the background B = P (.) M_bg taken from the canvas. All window-sized.
template <typename Scalar>
struct ContextualPatch {
  Image<Scalar> canvas;
  BoundingBox placement;  // scaled bbox in scene coordinates
  Window window;          // placement clipped to the scene, in pixels
  Mask<Scalar> fg, bg;
  Image<Scalar> foreground, background;

  Image<Scalar> contextual() const {
    return Image<Scalar>(window.rows, window.cols, (foreground.data() + background.data()).eval());
  }
  Mask<Scalar> mask() const {
    Mask<Scalar> m(window.rows, window.cols);
    m.data() = fg.data() + bg.data();
    return m;
  }
};

template <typename Scalar>
ContextualPatch<Scalar> contextualize(const Image<Scalar>& scene_image, const TargetRegion& region,
                                      const Image<Scalar>& canvas, const Mask<float>* exclude = nullptr) {
  const ImageDims dims = scene_image.dims();
  const MaskPair<Scalar> masks = extract_masks<Scalar>(region, dims, exclude);
  ContextualPatch<Scalar> p;
  p.canvas = canvas;
  p.placement = region.bbox.scaled(region.context_scale);
  p.window = pixel_window(p.placement, dims);
  if (p.window.empty()) throw BoundsError("patch placement lies fully outside the scene");
  p.fg = crop(masks.fg, p.window);
  p.bg = crop(masks.bg, p.window);
  const ResampleTaps taps(canvas.height(), canvas.width(), p.placement, p.window);
  const Image<Scalar> resampled = taps.apply(canvas);
  const Image<Scalar> target = crop(scene_image, p.window);
  p.foreground = Image<Scalar>(p.window.rows, p.window.cols, (target.data() * detail::broadcast(p.fg)).eval());
  p.background = Image<Scalar>(p.window.rows, p.window.cols, (resampled.data() * detail::broadcast(p.bg)).eval());
  return p;
}

template <typename Scalar>
Image<Scalar> place_patch(const Image<Scalar>& scene_image, const ContextualPatch<Scalar>& patch) {
  if (patch.window.empty()) throw BoundsError("patch placement lies fully outside the scene");
  Image<Scalar> out = scene_image;
  const Image<Scalar> region = crop(scene_image, patch.window);
  paste(out, patch.window, compose_adversarial(region, patch.contextual(), patch.mask()));
  return out;
}

/// Union of all target silhouettes of a scene (binarized).
inline Mask<float> foreground_union(const Scene& scene) {
  Mask<float> u(scene.image.height(), scene.image.width());
  for (const auto& t : scene.targets) u.data() = u.data().max(t.fg_mask.binarized().data());
  return u;
}

/// Places `canvas` around `region` of `scene`, keeping every silhouette of the scene out of the ring.
template <typename Scalar>
Image<Scalar> place_patch(const Scene& scene, const Image<Scalar>& canvas, const TargetRegion& region) {
  const Image<Scalar> img = scene.image.template cast<Scalar>();
  const Mask<float> excl = foreground_union(scene);
  return place_patch(img, contextualize(img, region, canvas, &excl));
}

/// True when `composed` equals `clean` exactly on every pixel where `fg` is set.
template <typename Scalar>
bool foreground_preserved(const Image<Scalar>& clean, const Image<Scalar>& composed, const Mask<float>& fg) {
  for (Index p = 0; p < fg.pixels(); ++p) {
    if (fg.data()(p) < 0.5f) continue;
    for (Index ch = 0; ch < 3; ++ch)
      if (clean.data()(ch, p) != composed.data()(ch, p)) return false;
  }
  return true;
}

/// Composites one shared canvas around every target of a scene and provides
/// the exact adjoint of that map with respect to the canvas. Targets are
/// applied in order; a later ring overwrites an earlier one where they overlap.
template <typename Scalar>
class SceneCompositor {
 public:
  SceneCompositor() = default;
  /// `mask_gain` scales both masks; 0 gives the no-op compositor.
  SceneCompositor(const Scene& scene, double context_scale, Index canvas_h, Index canvas_w, double mask_gain = 1.0)
      : clean_(scene.image.template cast<Scalar>()), fg_union_(foreground_union(scene)) {
    const ImageDims dims = clean_.dims();
    for (const auto& t : scene.targets) {
      TargetRegion region = t;
      region.context_scale = context_scale;
      const MaskPair<Scalar> masks = extract_masks<Scalar>(region, dims, &fg_union_);
      Slot s;
      s.placement = region.bbox.scaled(context_scale);
      s.window = pixel_window(s.placement, dims);
      if (s.window.empty()) continue;
      s.fg = crop(masks.fg, s.window);
      s.bg = crop(masks.bg, s.window);
      if (mask_gain != 1.0) {
        s.fg.data() *= Scalar(mask_gain);
        s.bg.data() *= Scalar(mask_gain);
      }
      s.taps = ResampleTaps(canvas_h, canvas_w, s.placement, s.window);
      slots_.push_back(std::move(s));
    }
  }

  const Image<Scalar>& clean() const { return clean_; }
  const Mask<float>& foreground() const { return fg_union_; }

  Image<Scalar> forward(const Image<Scalar>& canvas) const {
    Image<Scalar> out = clean_;
    for (const auto& s : slots_) {
      const Image<Scalar> target = crop(clean_, s.window);
      const Image<Scalar> contextual = build_contextual_patch(target, s.fg, s.bg, s.taps.apply(canvas));
      Mask<Scalar> m(s.window.rows, s.window.cols);
      m.data() = s.fg.data() + s.bg.data();
      paste(out, s.window, compose_adversarial(crop(out, s.window), contextual, m));
    }
    return out;
  }

  /// Gradient with respect to the canvas given the gradient with respect to forward()'s output.
  typename Image<Scalar>::Storage backward(const typename Image<Scalar>::Storage& grad_out,
                                           Index canvas_h, Index canvas_w) const {
    typename Image<Scalar>::Storage g = grad_out;
    typename Image<Scalar>::Storage canvas_grad = Image<Scalar>::Storage::Zero(3, canvas_h * canvas_w);
    const Index width = clean_.width();
    for (auto it = slots_.rbegin(); it != slots_.rend(); ++it) {
      const Slot& s = *it;
      typename Image<Scalar>::Storage local(3, s.window.pixels());
      for (Index r = 0; r < s.window.rows; ++r)
        for (Index c = 0; c < s.window.cols; ++c) {
          const Index gp = (s.window.row0 + r) * width + s.window.col0 + c;
          const Index lp = r * s.window.cols + c;
          const Scalar m = s.fg.data()(lp) + s.bg.data()(lp);
          for (Index ch = 0; ch < 3; ++ch) {
            local(ch, lp) = g(ch, gp) * m * s.bg.data()(lp);
            g(ch, gp) *= Scalar(1) - m;
          }
        }
      s.taps.template accumulate_adjoint<Scalar>(local, canvas_grad);
    }
    return canvas_grad;
  }

 private:
  struct Slot {
    BoundingBox placement;
    Window window;
    Mask<Scalar> fg, bg;
    ResampleTaps taps;
  };
  Image<Scalar> clean_;
  Mask<float> fg_union_;
  std::vector<Slot> slots_;
};

}  // namespace ctxpatch
