#pragma once

#include <array>
#include <string>
#include <vector>

#include "ctxpatch/detector.hpp"
#include "ctxpatch/image.hpp"

namespace ctxpatch::plot {

using Color = std::array<float, 3>;

inline constexpr Color kPalette[] = {
    {0.12f, 0.47f, 0.71f}, {1.00f, 0.50f, 0.05f}, {0.17f, 0.63f, 0.17f},
    {0.84f, 0.15f, 0.16f}, {0.58f, 0.40f, 0.74f}, {0.55f, 0.34f, 0.29f},
};

inline Color palette(std::size_t i) { return kPalette[i % (sizeof kPalette / sizeof kPalette[0])]; }

/// Polylines over a shared y range, drawn on a white canvas with a frame.
Image<float> line_plot(const std::vector<std::vector<double>>& series, int width = 480, int height = 320);

/// Grouped bars: groups[g][b] is bar b of group g. Values are clamped to [0, 1].
Image<float> bar_chart(const std::vector<std::vector<double>>& groups, int width = 480, int height = 320);

/// Scene blended with a colormapped heatmap.
Image<float> heatmap_overlay(const Image<float>& image, const Heatmap& heatmap, float alpha = 0.5f);

}  // namespace ctxpatch::plot
