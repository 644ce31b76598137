#include "ctxpatch/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <vector>

namespace ctxpatch {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

// Decodes to 8-bit, `channels` = 1 (gray) or 3 (RGB).
std::vector<unsigned char> decode(const std::filesystem::path& path, int channels, png_uint_32& w,
                                  png_uint_32& h) {
  FilePtr f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw IoError("libpng init failed");
  std::vector<unsigned char> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
  if (channels == 3 && gray) png_set_gray_to_rgb(png);
  if (channels == 1 && !gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  pixels.resize(std::size_t(w) * h * channels);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 r = 0; r < h; ++r) rows[r] = pixels.data() + std::size_t(r) * w * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

void encode(const std::filesystem::path& path, const std::vector<unsigned char>& pixels, png_uint_32 w,
            png_uint_32 h, int channels) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw IoError("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 r = 0; r < h; ++r)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + std::size_t(r) * w * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Image<float> read_png(const std::filesystem::path& path) {
  png_uint_32 w = 0, h = 0;
  const auto px = decode(path, 3, w, h);
  Image<float> img{Index(h), Index(w)};
  for (Index p = 0; p < img.pixels(); ++p)
    for (Index ch = 0; ch < 3; ++ch) img.data()(ch, p) = float(px[std::size_t(p * 3 + ch)]) / 255.0f;
  return img;
}

void write_png(const std::filesystem::path& path, const Image<float>& image) {
  std::vector<unsigned char> px(std::size_t(image.pixels()) * 3);
  for (Index p = 0; p < image.pixels(); ++p)
    for (Index ch = 0; ch < 3; ++ch) px[std::size_t(p * 3 + ch)] = to_byte(image.data()(ch, p));
  encode(path, px, png_uint_32(image.width()), png_uint_32(image.height()), 3);
}

Mask<float> read_mask_png(const std::filesystem::path& path) {
  png_uint_32 w = 0, h = 0;
  const auto px = decode(path, 1, w, h);
  Mask<float> m{Index(h), Index(w)};
  for (Index p = 0; p < m.pixels(); ++p) m.data()(p) = float(px[std::size_t(p)]) / 255.0f;
  return m;
}

void write_mask_png(const std::filesystem::path& path, const Mask<float>& mask) {
  std::vector<unsigned char> px(std::size_t(mask.pixels()));
  for (Index p = 0; p < mask.pixels(); ++p) px[std::size_t(p)] = to_byte(mask.data()(p));
  encode(path, px, png_uint_32(mask.width()), png_uint_32(mask.height()), 1);
}

}  // namespace ctxpatch
