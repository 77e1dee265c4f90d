#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "o2mag/numerics/tensor.hpp"

namespace o2mag {

/// RGB image as a [3, H, W] tensor with values in [-1, 1].
using Image = Tensor;

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;  // row-major, 0 or 1

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t area() const noexcept;
  bool operator==(const BinaryMask&) const = default;
};

/// Snap values to the 8-bit grid so a PNG round trip is lossless.
void quantize_to_u8_grid(Image& img);
std::uint8_t to_u8(float v) noexcept;
float from_u8(std::uint8_t v) noexcept;

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_mask_png(const std::filesystem::path& path);
/// Single-channel float map in [0, 1] written as gray.
void write_gray_png(const std::filesystem::path& path, const std::vector<float>& values, std::size_t h, std::size_t w);
void write_rgb8_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, std::size_t h,
                    std::size_t w);

/// Chebyshev dilation by `radius` pixels (a (2r+1)x(2r+1) square).
BinaryMask dilate(const BinaryMask& m, std::size_t radius);

}  // namespace o2mag
