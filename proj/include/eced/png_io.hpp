// SPDX-License-Identifier: Apache-2.0
#pragma once

// 8-bit PNG reading and writing. Quantization happens only here; everything
// upstream works on real-valued [0, 1] arrays.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "eced/kv.hpp"
#include "eced/types.hpp"

namespace eced {

struct RgbPixels {
  int width = 0, height = 0, channels = 3;  // 1 (gray) or 3 (rgb)
  std::vector<std::uint8_t> bytes;         // row-major, interleaved
};

inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// `meta` is stored as PNG tEXt chunks.
inline void write_png(const std::filesystem::path& path, const RgbPixels& px, const KeyValues& meta = {}) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(px.width), static_cast<png_uint_32>(px.height), 8,
               px.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_text> text;
  for (const auto& [k, v] : meta) {
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = const_cast<png_charp>(k.c_str());
    t.text = const_cast<png_charp>(v.c_str());
    t.text_length = v.size();
    text.push_back(t);
  }
  if (!text.empty()) png_set_text(png, info, text.data(), static_cast<int>(text.size()));
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(px.width) * px.channels;
  for (int y = 0; y < px.height; ++y)
    png_write_row(png, const_cast<png_bytep>(px.bytes.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline RgbPixels read_png(const std::filesystem::path& path, KeyValues* meta = nullptr) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  // Normalize everything to 8-bit RGB.
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  RgbPixels px;
  px.width = static_cast<int>(png_get_image_width(png, info));
  px.height = static_cast<int>(png_get_image_height(png, info));
  px.channels = 3;
  const std::size_t stride = png_get_rowbytes(png, info);
  px.bytes.resize(stride * px.height);
  std::vector<png_bytep> rows(static_cast<std::size_t>(px.height));
  for (int y = 0; y < px.height; ++y) rows[static_cast<std::size_t>(y)] = px.bytes.data() + y * stride;
  png_read_image(png, rows.data());
  if (meta) {
    png_textp text = nullptr;
    const int n = png_get_text(png, info, &text, nullptr);
    for (int i = 0; i < n; ++i) (*meta)[text[i].key] = std::string(text[i].text, text[i].text_length);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return px;
}

template <typename T>
RgbPixels to_pixels(const ImageTensor<T>& img) {
  RgbPixels px{img.width(), img.height(), 3, {}};
  px.bytes.reserve(img.size());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) px.bytes.push_back(quantize_unit(img.at(y, x, c)));
  return px;
}

template <typename T>
ImageTensor<T> from_pixels(const RgbPixels& px) {
  ImageTensor<T> img(px.height, px.width);
  for (int y = 0; y < px.height; ++y)
    for (int x = 0; x < px.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = static_cast<T>(px.bytes[(static_cast<std::size_t>(y) * px.width + x) * 3 + c] / 255.0);
  return img;
}

inline RgbPixels gray_pixels(int height, int width, const std::vector<double>& values) {
  RgbPixels px{width, height, 1, {}};
  for (double v : values) px.bytes.push_back(quantize_unit(v));
  return px;
}

template <typename T>
void write_image_png(const std::filesystem::path& path, const ImageTensor<T>& img, const KeyValues& meta = {}) {
  write_png(path, to_pixels(img), meta);
}

inline void write_mask_png(const std::filesystem::path& path, const BinaryMask& m, const KeyValues& meta = {}) {
  std::vector<double> v(m.data.begin(), m.data.end());
  write_png(path, gray_pixels(m.height, m.width, v), meta);
}

inline void write_map_png(const std::filesystem::path& path, const AttentionMap& u, const KeyValues& meta = {}) {
  write_png(path, gray_pixels(u.height, u.width, u.data), meta);
}

// Horizontal strip of equally sized RGB panels with a 2-pixel white gutter.
inline RgbPixels hstack(const std::vector<RgbPixels>& panels) {
  if (panels.empty()) return {};
  const int H = panels[0].height, gutter = 2;
  int W = 0;
  for (const auto& p : panels) W += p.width + gutter;
  W -= gutter;
  RgbPixels out{W, H, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(W) * H * 3, 255)};
  int x0 = 0;
  for (const auto& p : panels) {
    for (int y = 0; y < std::min(H, p.height); ++y)
      for (int x = 0; x < p.width; ++x)
        for (int c = 0; c < 3; ++c)
          out.bytes[(static_cast<std::size_t>(y) * W + x0 + x) * 3 + c] =
              p.bytes[(static_cast<std::size_t>(y) * p.width + x) * p.channels + (p.channels == 1 ? 0 : c)];
    x0 += p.width + gutter;
  }
  return out;
}

}  // namespace eced
