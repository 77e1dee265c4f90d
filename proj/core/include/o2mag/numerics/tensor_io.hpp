#pragma once

#include <filesystem>
#include <iosfwd>

#include "o2mag/numerics/tensor.hpp"

namespace o2mag {

// Binary layout: "TNSR", u32 version, u8 dtype (0 = f32), u8 ndim,
// u64 dims, then the little-endian payload.
inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace o2mag
