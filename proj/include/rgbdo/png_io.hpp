#pragma once

// Minimal PNG reading and writing on top of libpng: 8-bit RGB for color
// images and 16-bit grayscale for depth maps. 16-bit samples are packed
// big-endian by hand on both paths, so the files are byte-portable and no
// endian flags are involved.

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "rgbdo/common.hpp"

namespace rgbdo::io {

namespace detail {

struct FileCloser {
  std::FILE* fp = nullptr;
  ~FileCloser() {
    if (fp) std::fclose(fp);
  }
};

}  // namespace detail

using RasterU16 = Raster<std::uint16_t>;

// Depth images follow the common RGB-D dataset convention of 16-bit values
// in 1/5000 meter units; 0 marks a missing measurement in both domains.
inline constexpr double kDepthScale = 5000.0;

inline RasterU16 depth_to_raw(const RasterF& depth, double scale = kDepthScale) {
  RasterU16 raw(depth.width(), depth.height());
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x) {
      const double v = depth(x, y) * scale;
      raw(x, y) = v <= 0.0 ? 0
                 : v >= 65535.0
                     ? 65535
                     : static_cast<std::uint16_t>(v + 0.5);
    }
  return raw;
}

inline RasterF raw_to_depth(const RasterU16& raw, double scale = kDepthScale) {
  RasterF depth(raw.width(), raw.height());
  for (int y = 0; y < raw.height(); ++y)
    for (int x = 0; x < raw.width(); ++x)
      depth(x, y) = raw(x, y) == 0 ? 0.f : static_cast<float>(raw(x, y) / scale);
  return depth;
}

inline void write_png_gray16(const std::string& path, const RasterU16& img) {
  if (img.empty()) throw InvalidArgument("write_png_gray16: empty image");
  detail::FileCloser file{std::fopen(path.c_str(), "wb")};
  if (!file.fp) throw Error("write_png_gray16: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  std::vector<std::uint8_t> row;
  std::vector<png_bytep> rows;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    throw Error("write_png_gray16: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("write_png_gray16: encode failed for " + path);
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, img.width(), img.height(), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  row.resize(static_cast<std::size_t>(img.width()) * 2);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const std::uint16_t v = img(x, y);
      row[2 * x] = static_cast<std::uint8_t>(v >> 8);
      row[2 * x + 1] = static_cast<std::uint8_t>(v & 0xFF);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline RasterU16 read_png_gray16(const std::string& path) {
  detail::FileCloser file{std::fopen(path.c_str(), "rb")};
  if (!file.fp) throw NotFoundError("read_png_gray16: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  RasterU16 out;
  std::vector<std::uint8_t> row;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    throw Error("read_png_gray16: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("read_png_gray16: decode failed for " + path, 0);
  }
  png_init_io(png, file.fp);
  png_read_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || depth != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("read_png_gray16: " + path + " is not 16-bit grayscale", 0);
  }

  out = RasterU16(width, height);
  row.resize(static_cast<std::size_t>(width) * 2);
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < width; ++x)
      out(x, y) = static_cast<std::uint16_t>((row[2 * x] << 8) | row[2 * x + 1]);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline void write_png_rgb8(const std::string& path, const RasterRgb& img) {
  if (img.empty()) throw InvalidArgument("write_png_rgb8: empty image");
  detail::FileCloser file{std::fopen(path.c_str(), "wb")};
  if (!file.fp) throw Error("write_png_rgb8: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  std::vector<std::uint8_t> row;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    throw Error("write_png_rgb8: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("write_png_rgb8: encode failed for " + path);
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, img.width(), img.height(), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  auto quantize = [](float v) {
    const float s = v <= 0.f ? 0.f : v >= 1.f ? 1.f : v;
    return static_cast<std::uint8_t>(s * 255.f + 0.5f);
  };
  row.resize(static_cast<std::size_t>(img.width()) * 3);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const Rgb& c = img(x, y);
      row[3 * x] = quantize(c.r);
      row[3 * x + 1] = quantize(c.g);
      row[3 * x + 2] = quantize(c.b);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads any color PNG as 8-bit RGB in [0, 1]: palette, grayscale, alpha and
// 16-bit inputs are converted on the fly.
inline RasterRgb read_png_rgb8(const std::string& path) {
  detail::FileCloser file{std::fopen(path.c_str(), "rb")};
  if (!file.fp) throw NotFoundError("read_png_rgb8: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  RasterRgb out;
  std::vector<std::uint8_t> row;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    throw Error("read_png_rgb8: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("read_png_rgb8: decode failed for " + path, 0);
  }
  png_init_io(png, file.fp);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("read_png_rgb8: unexpected row layout in " + path, 0);
  }

  out = RasterRgb(width, height);
  row.resize(static_cast<std::size_t>(width) * 3);
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < width; ++x) {
      out(x, y).r = row[3 * x] / 255.f;
      out(x, y).g = row[3 * x + 1] / 255.f;
      out(x, y).b = row[3 * x + 2] / 255.f;
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace rgbdo::io
