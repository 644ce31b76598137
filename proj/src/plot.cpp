#include "plot.hpp"

#include <algorithm>
#include <cmath>

namespace ctxpatch::plot {
namespace {

struct Frame {
  int left = 36, right = 12, top = 12, bottom = 28;
};

void set(Image<float>& img, Index r, Index c, const Color& col) {
  if (r < 0 || c < 0 || r >= img.height() || c >= img.width()) return;
  for (Index ch = 0; ch < 3; ++ch) img(r, c, ch) = col[std::size_t(ch)];
}

void fill_rect(Image<float>& img, Index r0, Index c0, Index r1, Index c1, const Color& col) {
  for (Index r = std::max<Index>(0, r0); r < std::min(img.height(), r1); ++r)
    for (Index c = std::max<Index>(0, c0); c < std::min(img.width(), c1); ++c) set(img, r, c, col);
}

void line(Image<float>& img, double x0, double y0, double x1, double y1, const Color& col) {
  const int steps = int(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = double(i) / steps;
    const Index c = Index(std::lround(x0 + t * (x1 - x0))), r = Index(std::lround(y0 + t * (y1 - y0)));
    set(img, r, c, col);
    set(img, r + 1, c, col);
  }
}

void axes(Image<float>& img, const Frame& f) {
  const Color grid{0.88f, 0.88f, 0.88f}, ink{0.2f, 0.2f, 0.2f};
  const Index w = img.width(), h = img.height();
  for (int k = 1; k < 4; ++k) {
    const double y = f.top + (h - f.top - f.bottom) * k / 4.0;
    line(img, f.left, y, double(w - f.right), y, grid);
  }
  line(img, f.left, f.top, f.left, double(h - f.bottom), ink);
  line(img, f.left, double(h - f.bottom), double(w - f.right), double(h - f.bottom), ink);
}

Color jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const auto ch = [v](double c) { return float(std::clamp(1.5 - std::abs(4 * v - c), 0.0, 1.0)); };
  return {ch(3), ch(2), ch(1)};
}

}  // namespace

Image<float> line_plot(const std::vector<std::vector<double>>& series, int width, int height) {
  Image<float> img(height, width, 1.0f);
  const Frame f;
  axes(img, f);
  double lo = 0, hi = 0;
  std::size_t longest = 0;
  bool any = false;
  for (const auto& s : series)
    for (double v : s)
      if (std::isfinite(v)) {
        lo = any ? std::min(lo, v) : v;
        hi = any ? std::max(hi, v) : v;
        any = true;
      }
  for (const auto& s : series) longest = std::max(longest, s.size());
  if (!any || longest == 0) return img;
  if (hi - lo < 1e-12) hi = lo + 1;
  const double pw = width - f.left - f.right, ph = height - f.top - f.bottom;
  const auto px = [&](std::size_t i) { return f.left + pw * double(i) / double(std::max<std::size_t>(1, longest - 1)); };
  const auto py = [&](double v) { return f.top + ph * (1 - (v - lo) / (hi - lo)); };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    for (std::size_t i = 1; i < s.size(); ++i)
      if (std::isfinite(s[i - 1]) && std::isfinite(s[i])) line(img, px(i - 1), py(s[i - 1]), px(i), py(s[i]), palette(k));
    if (s.size() == 1) fill_rect(img, Index(py(s[0])) - 1, Index(px(0)) - 1, Index(py(s[0])) + 2, Index(px(0)) + 2, palette(k));
  }
  return img;
}

Image<float> bar_chart(const std::vector<std::vector<double>>& groups, int width, int height) {
  Image<float> img(height, width, 1.0f);
  const Frame f;
  axes(img, f);
  if (groups.empty()) return img;
  const double pw = width - f.left - f.right, ph = height - f.top - f.bottom;
  const double gw = pw / double(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& bars = groups[g];
    if (bars.empty()) continue;
    const double bw = 0.8 * gw / double(bars.size());
    for (std::size_t b = 0; b < bars.size(); ++b) {
      const double v = std::clamp(bars[b], 0.0, 1.0);
      const double x0 = f.left + g * gw + 0.1 * gw + b * bw;
      fill_rect(img, Index(f.top + ph * (1 - v)), Index(x0), Index(height - f.bottom), Index(x0 + bw - 1), palette(b));
    }
  }
  return img;
}

Image<float> heatmap_overlay(const Image<float>& image, const Heatmap& heatmap, float alpha) {
  Image<float> out = image;
  if (heatmap.height != image.height() || heatmap.width != image.width()) return out;
  for (Index r = 0; r < image.height(); ++r)
    for (Index c = 0; c < image.width(); ++c) {
      const Color col = jet(heatmap.data(r, c));
      for (Index ch = 0; ch < 3; ++ch)
        out(r, c, ch) = (1 - alpha) * image(r, c, ch) + alpha * col[std::size_t(ch)];
    }
  return out;
}

}  // namespace ctxpatch::plot
