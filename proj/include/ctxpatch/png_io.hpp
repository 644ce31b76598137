#pragma once

#include <filesystem>

#include "ctxpatch/image.hpp"

namespace ctxpatch {

/// 8-bit RGB PNG; values map linearly, v = byte / 255. Gray and alpha inputs are converted.
Image<float> read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image<float>& image);

/// Single-channel 8-bit PNG.
Mask<float> read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const Mask<float>& mask);

inline unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace ctxpatch
