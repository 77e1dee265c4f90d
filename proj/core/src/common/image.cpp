#include "o2mag/common/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace o2mag {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

void write_png_raw(const std::filesystem::path& path, const std::uint8_t* data, std::size_t h, std::size_t w,
                   int color_type, int channels) {
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng write failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + y * w * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Returns 8-bit pixels with the requested channel count (1 or 3).
std::vector<std::uint8_t> read_png_raw(const std::filesystem::path& path, int want_channels, std::size_t& h,
                                       std::size_t& w) {
  auto f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng init failed for " + path.string());
  }
  std::vector<std::uint8_t> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("not a readable PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
  if (want_channels == 3 && gray) png_set_gray_to_rgb(png);
  if (want_channels == 1 && !gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != w * static_cast<std::size_t>(want_channels)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("unexpected PNG layout in " + path.string());
  }
  out.resize(h * rowbytes);
  for (std::size_t y = 0; y < h; ++y) png_read_row(png, out.data() + y * rowbytes, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

std::size_t BinaryMask::area() const noexcept {
  std::size_t n = 0;
  for (auto b : bits) n += b != 0;
  return n;
}

std::uint8_t to_u8(float v) noexcept {
  const float s = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return static_cast<std::uint8_t>(s);
}

float from_u8(std::uint8_t v) noexcept { return static_cast<float>(v) / 127.5f - 1.0f; }

void quantize_to_u8_grid(Image& img) {
  for (auto& v : img.data()) v = from_u8(to_u8(v));
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.ndim() != 3 || img.dim(0) != 3) throw std::invalid_argument("write_png: expected [3,H,W], got " + shape_string(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> rgb(h * w * 3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) rgb[i * 3 + c] = to_u8(img[c * h * w + i]);
  write_png_raw(path, rgb.data(), h, w, PNG_COLOR_TYPE_RGB, 3);
}

Image read_png(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  auto rgb = read_png_raw(path, 3, h, w);
  Image img({3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) img[c * h * w + i] = from_u8(rgb[i * 3 + c]);
  return img;
}

void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> g(mask.bits.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = mask.bits[i] ? 255 : 0;
  write_png_raw(path, g.data(), mask.height, mask.width, PNG_COLOR_TYPE_GRAY, 1);
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  auto g = read_png_raw(path, 1, h, w);
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < g.size(); ++i) m.bits[i] = g[i] >= 128 ? 1 : 0;
  return m;
}

void write_gray_png(const std::filesystem::path& path, const std::vector<float>& values, std::size_t h,
                    std::size_t w) {
  if (values.size() != h * w) throw std::invalid_argument("write_gray_png: size mismatch");
  std::vector<std::uint8_t> g(h * w);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = static_cast<std::uint8_t>(std::round(std::clamp(values[i], 0.0f, 1.0f) * 255.0f));
  }
  write_png_raw(path, g.data(), h, w, PNG_COLOR_TYPE_GRAY, 1);
}

void write_rgb8_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, std::size_t h,
                    std::size_t w) {
  if (rgb.size() != h * w * 3) throw std::invalid_argument("write_rgb8_png: size mismatch");
  write_png_raw(path, rgb.data(), h, w, PNG_COLOR_TYPE_RGB, 3);
}

BinaryMask dilate(const BinaryMask& m, std::size_t radius) {
  BinaryMask out(m.height, m.width);
  const auto r = static_cast<long>(radius);
  const auto h = static_cast<long>(m.height), w = static_cast<long>(m.width);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      if (!m.bits[y * w + x]) continue;
      for (long yy = std::max(0L, y - r); yy <= std::min(h - 1, y + r); ++yy)
        for (long xx = std::max(0L, x - r); xx <= std::min(w - 1, x + r); ++xx) out.bits[yy * w + xx] = 1;
    }
  }
  return out;
}

}  // namespace o2mag
