#include "o2mag/numerics/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace o2mag {
namespace {

static_assert(std::endian::native == std::endian::little, "tensor payloads are written in host order");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw std::runtime_error("tensor: truncated stream");
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("TNSR", 4);
  put<std::uint32_t>(os, kTensorFormatVersion);
  put<std::uint8_t>(os, kDtypeF32);
  if (t.ndim() > 255) throw std::invalid_argument("tensor: too many dimensions to serialize");
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!os) throw std::runtime_error("tensor: write failed");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "TNSR", 4) != 0) {
    throw std::runtime_error("tensor: bad magic");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kTensorFormatVersion) {
    throw std::runtime_error("tensor: unsupported version " + std::to_string(version));
  }
  const auto dtype = get<std::uint8_t>(is);
  if (dtype != kDtypeF32) throw std::runtime_error("tensor: unsupported dtype code " + std::to_string(dtype));
  const auto ndim = get<std::uint8_t>(is);
  Shape shape(ndim);
  for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
  Tensor t(shape);
  if (!is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)))) {
    throw std::runtime_error("tensor: truncated payload for shape " + shape_string(shape));
  }
  return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("tensor: cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("tensor: cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace o2mag
