#pragma once

// 8-bit RGB images and 16-bit mask planes, with PNG encode/decode through
// libpng. Output is deterministic: no timestamps, fixed compression settings.

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "tokenforge/error.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0) {}

  std::uint8_t* px(std::size_t y, std::size_t x) { return pixels.data() + (y * width + x) * 3; }
  const std::uint8_t* px(std::size_t y, std::size_t x) const {
    return pixels.data() + (y * width + x) * 3;
  }
  bool operator==(const RgbImage&) const = default;
};

/// Single-channel 16-bit plane; 0 is background.
struct MaskPlane {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> values;

  MaskPlane() = default;
  MaskPlane(std::size_t w, std::size_t h) : width(w), height(h), values(w * h, 0) {}

  std::uint16_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  bool operator==(const MaskPlane&) const = default;
};

using PngText = std::vector<std::pair<std::string, std::string>>;

namespace detail {

struct PngWriteBuffer {
  std::vector<std::uint8_t> bytes;
};

inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buf->bytes.insert(buf->bytes.end(), data, data + len);
}

inline void png_flush_noop(png_structp) {}

[[noreturn]] inline void png_error_throw(png_structp, png_const_charp msg) {
  throw Error(Errc::BadImage, std::string("libpng: ") + msg);
}

inline void png_warning_ignore(png_structp, png_const_charp) {}

// color_type: PNG_COLOR_TYPE_RGB or PNG_COLOR_TYPE_GRAY; bit_depth 8 or 16.
// rows are tightly packed, 16-bit samples given in host order.
inline std::vector<std::uint8_t> encode_png(std::size_t width, std::size_t height, int color_type,
                                            int bit_depth, const std::uint8_t* data,
                                            const PngText& text = {}) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw,
                                            png_warning_ignore);
  if (png == nullptr) fail(Errc::IoFailure, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  PngWriteBuffer buf;
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t bytes_per_sample = bit_depth == 16 ? 2 : 1;
  const std::size_t row_bytes = width * channels * bytes_per_sample;
  std::vector<std::uint8_t> row(row_bytes);
  try {
    png_set_write_fn(png, &buf, png_write_to_vector, png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
                 bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    std::vector<png_text> chunks(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      std::memset(&chunks[i], 0, sizeof(png_text));
      chunks[i].compression = PNG_TEXT_COMPRESSION_NONE;
      chunks[i].key = const_cast<char*>(text[i].first.c_str());
      chunks[i].text = const_cast<char*>(text[i].second.c_str());
      chunks[i].text_length = text[i].second.size();
    }
    if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
    png_write_info(png, info);
    for (std::size_t y = 0; y < height; ++y) {
      const std::uint8_t* src = data + y * row_bytes;
      if (bit_depth == 16) {
        // PNG stores 16-bit samples big-endian.
        for (std::size_t i = 0; i < row_bytes; i += 2) {
          std::uint16_t v;
          std::memcpy(&v, src + i, 2);
          row[i] = static_cast<std::uint8_t>(v >> 8);
          row[i + 1] = static_cast<std::uint8_t>(v & 0xff);
        }
      } else {
        std::memcpy(row.data(), src, row_bytes);
      }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return std::move(buf.bytes);
}

struct PngReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

inline void png_read_from_memory(png_structp png, png_bytep out, png_size_t len) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->size) png_error(png, "truncated PNG data");
  std::memcpy(out, cur->data + cur->pos, len);
  cur->pos += len;
}

struct DecodedPng {
  std::size_t width = 0;
  std::size_t height = 0;
  int channels = 0;  // after expansion: 1 (gray) or 3 (rgb)
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;  // one per channel per pixel
  PngText text;
};

inline DecodedPng decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0)
    fail(Errc::BadImage, "not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw,
                                           png_warning_ignore);
  if (png == nullptr) fail(Errc::IoFailure, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  PngReadCursor cursor{bytes.data(), bytes.size(), 0};
  DecodedPng out;
  try {
    png_set_read_fn(png, &cursor, png_read_from_memory);
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
      png_set_strip_alpha(png);
    png_read_update_info(png, info);
    color = png_get_color_type(png, info);
    depth = png_get_bit_depth(png, info);
    out.width = w;
    out.height = h;
    out.bit_depth = depth;
    out.channels = png_get_channels(png, info);
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    std::vector<std::uint8_t> raw(row_bytes * h);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + y * row_bytes;
    png_read_image(png, rows.data());
    png_read_end(png, info);
    png_textp chunks = nullptr;
    int n_text = 0;
    png_get_text(png, info, &chunks, &n_text);
    for (int i = 0; i < n_text; ++i)
      out.text.emplace_back(chunks[i].key, std::string(chunks[i].text, chunks[i].text_length));
    const std::size_t n = static_cast<std::size_t>(w) * h * out.channels;
    out.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      out.samples[i] = depth == 16 ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1])
                                   : raw[i];
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoFailure, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::IoFailure, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::IoFailure, "short write to " + path.string());
}

inline std::vector<std::uint8_t> encode_rgb_png(const RgbImage& img, const PngText& text = {}) {
  return detail::encode_png(img.width, img.height, PNG_COLOR_TYPE_RGB, 8, img.pixels.data(), text);
}

inline std::vector<std::uint8_t> encode_mask_png(const MaskPlane& mask) {
  return detail::encode_png(mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 16,
                            reinterpret_cast<const std::uint8_t*>(mask.values.data()));
}

inline std::vector<std::uint8_t> encode_binary_png(const BinaryMask& mask) {
  std::vector<std::uint8_t> gray(mask.bits.size());
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = mask.bits[i] ? 255 : 0;
  return detail::encode_png(mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 8, gray.data());
}

/// Decodes any PNG into 8-bit RGB (gray is replicated, 16-bit is reduced).
inline RgbImage decode_rgb_png(std::span<const std::uint8_t> bytes, PngText* text = nullptr) {
  auto png = detail::decode_png(bytes);
  RgbImage img(png.width, png.height);
  const std::size_t n = png.width * png.height;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      const std::uint16_t v = png.samples[i * png.channels + (png.channels == 3 ? c : 0)];
      img.pixels[i * 3 + c] = png.bit_depth == 16 ? static_cast<std::uint8_t>(v >> 8)
                                                  : static_cast<std::uint8_t>(v);
    }
  if (text != nullptr) *text = std::move(png.text);
  return img;
}

inline MaskPlane decode_mask_png(std::span<const std::uint8_t> bytes) {
  auto png = detail::decode_png(bytes);
  if (png.channels != 1) fail(Errc::BadImage, "mask plane must be single-channel");
  MaskPlane mask(png.width, png.height);
  for (std::size_t i = 0; i < mask.values.size(); ++i) mask.values[i] = png.samples[i];
  return mask;
}

/// Any non-zero sample is foreground.
inline BinaryMask decode_binary_png(std::span<const std::uint8_t> bytes) {
  auto png = detail::decode_png(bytes);
  BinaryMask mask(png.height, png.width);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    bool on = false;
    for (int c = 0; c < png.channels; ++c) on = on || png.samples[i * png.channels + c] != 0;
    mask.bits[i] = on ? 1 : 0;
  }
  return mask;
}

inline RgbImage read_rgb_png(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_rgb_png(bytes);
}

inline MaskPlane read_mask_png(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_mask_png(bytes);
}

/// RGB image as an H x W x 3 grid with values in [0, 1].
template <typename T>
FeatureGrid<T> image_to_grid(const RgbImage& img) {
  FeatureGrid<T> g(img.height, img.width, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    g.data[i] = static_cast<T>(img.pixels[i]) / T(255);
  return g;
}

template <typename T>
RgbImage grid_to_image(const FeatureGrid<T>& g) {
  if (g.dim != 3) fail(Errc::ShapeError, "grid_to_image expects 3 channels");
  RgbImage img(g.width, g.height);
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const double v = std::clamp(static_cast<double>(g.data[i]), 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

}  // namespace tokenforge
