#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "fsp/error.hpp"

namespace fsp {

/// Row-major interleaved image.
template <class T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c = 1, T fill = T{})
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  bool empty() const { return data.empty(); }
  bool same_shape(int w, int h) const { return width == w && height == h; }

  T& at(int row, int col, int ch = 0) {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  const T& at(int row, int col, int ch = 0) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  bool contains(int row, int col) const { return row >= 0 && col >= 0 && row < height && col < width; }
};

using RgbImage = Image<float>;       ///< 3 channels in [0,1]
using DepthImage = Image<double>;    ///< metres, 0 = invalid
using MaskImage = Image<std::uint8_t>;  ///< 0 / 1

// ---------------------------------------------------------------------------
// PNG codec (libpng). Samples are raw integers; no gamma handling.
// ---------------------------------------------------------------------------
struct PngData {
  int width = 0, height = 0, channels = 0, bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

namespace detail {

inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

inline void png_flush_noop(png_structp) {}

struct PngReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

inline void png_read_from_memory(png_structp png, png_bytep out, png_size_t len) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->size) png_error(png, "truncated PNG stream");
  std::memcpy(out, cur->data + cur->pos, len);
  cur->pos += len;
}

[[noreturn]] inline void png_error_throw(png_structp, png_const_charp msg) {
  throw Error(Errc::IoError, std::string("libpng: ") + msg);
}

inline void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const PngData& img) {
  if (img.channels < 1 || img.channels > 4 || (img.bit_depth != 8 && img.bit_depth != 16))
    throw Error(Errc::InvalidParams, "unsupported PNG layout");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            detail::png_error_throw, detail::png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  const int color_types[] = {PNG_COLOR_TYPE_GRAY, PNG_COLOR_TYPE_GRAY_ALPHA, PNG_COLOR_TYPE_RGB,
                             PNG_COLOR_TYPE_RGB_ALPHA};
  try {
    png_set_write_fn(png, &out, detail::png_write_to_vector, detail::png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 img.bit_depth, color_types[img.channels - 1], PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t bytes_per_sample = img.bit_depth / 8;
    std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * img.channels * bytes_per_sample);
    for (int r = 0; r < img.height; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * img.width * img.channels;
      for (std::size_t i = 0; i < static_cast<std::size_t>(img.width) * img.channels; ++i) {
        const std::uint16_t v = img.samples[base + i];
        if (bytes_per_sample == 1) {
          row[i] = static_cast<std::uint8_t>(v);
        } else {
          row[2 * i] = static_cast<std::uint8_t>(v >> 8);  // PNG is big-endian
          row[2 * i + 1] = static_cast<std::uint8_t>(v & 0xff);
        }
      }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

inline PngData decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0)
    throw Error(Errc::IoError, "not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           detail::png_error_throw, detail::png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  detail::PngReadCursor cursor{bytes.data(), bytes.size(), 0};
  PngData img;
  try {
    png_set_read_fn(png, &cursor, detail::png_read_from_memory);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.channels = png_get_channels(png, info);
    img.bit_depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<std::uint8_t> row(rowbytes);
    const std::size_t per_row = static_cast<std::size_t>(img.width) * img.channels;
    img.samples.resize(per_row * img.height);
    for (int r = 0; r < img.height; ++r) {
      png_read_row(png, row.data(), nullptr);
      for (std::size_t i = 0; i < per_row; ++i) {
        img.samples[r * per_row + i] = img.bit_depth == 16
                                           ? static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1])
                                           : row[i];
      }
    }
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// --- typed conversions -----------------------------------------------------

inline PngData rgb_to_png(const RgbImage& rgb) {
  PngData p{rgb.width, rgb.height, 3, 8, {}};
  p.samples.resize(rgb.data.size());
  for (std::size_t i = 0; i < rgb.data.size(); ++i)
    p.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(rgb.data[i], 0.0f, 1.0f) * 255.0f));
  return p;
}

/// Depth in metres -> 16-bit millimetres (0 = invalid, saturates at 65535).
inline PngData depth_to_png(const DepthImage& depth) {
  PngData p{depth.width, depth.height, 1, 16, {}};
  p.samples.resize(depth.data.size());
  for (std::size_t i = 0; i < depth.data.size(); ++i) {
    const double mm = depth.data[i] > 0.0 ? std::round(depth.data[i] * 1000.0) : 0.0;
    p.samples[i] = static_cast<std::uint16_t>(std::clamp(mm, 0.0, 65535.0));
  }
  return p;
}

inline PngData mask_to_png(const MaskImage& mask) {
  PngData p{mask.width, mask.height, 1, 8, {}};
  p.samples.resize(mask.data.size());
  for (std::size_t i = 0; i < mask.data.size(); ++i) p.samples[i] = mask.data[i] ? 255 : 0;
  return p;
}

inline RgbImage png_to_rgb(const PngData& p) {
  RgbImage img(p.width, p.height, 3);
  const float scale = p.bit_depth == 16 ? 65535.0f : 255.0f;
  for (int r = 0; r < p.height; ++r)
    for (int c = 0; c < p.width; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const int src = p.channels >= 3 ? ch : 0;
        img.at(r, c, ch) = static_cast<float>(p.samples[(static_cast<std::size_t>(r) * p.width + c) * p.channels + src]) / scale;
      }
  return img;
}

inline DepthImage png_to_depth(const PngData& p) {
  if (p.channels != 1) throw Error(Errc::DatasetFormatError, "depth PNG must be single-channel");
  DepthImage img(p.width, p.height, 1);
  for (std::size_t i = 0; i < p.samples.size(); ++i) img.data[i] = p.samples[i] / 1000.0;
  return img;
}

inline MaskImage png_to_mask(const PngData& p) {
  MaskImage img(p.width, p.height, 1);
  for (int r = 0; r < p.height; ++r)
    for (int c = 0; c < p.width; ++c)
      img.at(r, c) = p.samples[(static_cast<std::size_t>(r) * p.width + c) * p.channels] > 0 ? 1 : 0;
  return img;
}

inline void write_png(const std::filesystem::path& path, const PngData& p) { write_file_bytes(path, encode_png(p)); }
inline PngData read_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path)); }

}  // namespace fsp
