#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "crossvlt/errors.hpp"
#include "crossvlt/image.hpp"

namespace crossvlt {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_fail(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }
inline void png_warn(png_structp, png_const_charp) {}

inline void write_png(const std::string& path, int width, int height, int color_type, int bit_depth,
                      const std::vector<std::vector<png_byte>>& rows) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  try {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth < 8) png_set_packing(png);
    for (const auto& r : rows) png_write_row(png, r.data());
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

/// Reads any PNG as 8-bit RGB or gray rows.
inline std::vector<std::vector<png_byte>> read_png(const std::string& path, bool rgb, int& width, int& height) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::vector<std::vector<png_byte>> rows;
  try {
    png_init_io(png, f.get());
    png_read_info(png, info);
    const int ct = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (ct == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (ct & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (rgb && (ct == PNG_COLOR_TYPE_GRAY || ct == PNG_COLOR_TYPE_GRAY_ALPHA)) png_set_gray_to_rgb(png);
    if (!rgb && (ct & PNG_COLOR_MASK_COLOR)) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const auto rowbytes = png_get_rowbytes(png, info);
    rows.assign(static_cast<std::size_t>(height), std::vector<png_byte>(rowbytes));
    for (auto& r : rows) png_read_row(png, r.data(), nullptr);
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return rows;
}

}  // namespace detail

/// 8-bit RGB PNG; values are rounded to the nearest k/255.
inline void write_png_rgb(const std::string& path, const Image& img) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(img.height),
                                          std::vector<png_byte>(static_cast<std::size_t>(3 * img.width)));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::min(1.0f, std::max(0.0f, img.at(c, y, x)));
        rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(3 * x + c)] =
            static_cast<png_byte>(std::lround(v * 255.0f));
      }
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 8, rows);
}

/// 1-bit grayscale PNG.
inline void write_png_mask(const std::string& path, const Mask& m) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(m.height),
                                          std::vector<png_byte>(static_cast<std::size_t>(m.width)));
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)] = m.at(y, x) ? 1 : 0;
  detail::write_png(path, m.width, m.height, PNG_COLOR_TYPE_GRAY, 1, rows);
}

/// 8-bit grayscale PNG of probabilities in [0, 1].
inline void write_png_gray(const std::string& path, int height, int width, const std::vector<double>& values) {
  if (values.size() != static_cast<std::size_t>(height) * width) throw ShapeError("write_png_gray: size mismatch");
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(height),
                                          std::vector<png_byte>(static_cast<std::size_t>(width)));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double v = std::min(1.0, std::max(0.0, values[static_cast<std::size_t>(y) * width + x]));
      rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)] = static_cast<png_byte>(std::lround(v * 255.0));
    }
  detail::write_png(path, width, height, PNG_COLOR_TYPE_GRAY, 8, rows);
}

inline Image read_png_rgb(const std::string& path) {
  int w = 0, h = 0;
  const auto rows = detail::read_png(path, true, w, h);
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(3 * x + c)] / 255.0f;
  return img;
}

/// Any nonzero gray value is foreground.
inline Mask read_png_mask(const std::string& path) {
  int w = 0, h = 0;
  const auto rows = detail::read_png(path, false, w, h);
  Mask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x) = rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)] ? 1 : 0;
  return m;
}

}  // namespace crossvlt
