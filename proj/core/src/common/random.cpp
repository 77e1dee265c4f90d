#include "o2mag/common/random.hpp"

namespace o2mag {

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h) noexcept {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_string(std::string_view s) noexcept { return fnv1a(s.data(), s.size()); }

std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t index) noexcept {
  return mix64(mix64(parent ^ hash_string(label)) + index);
}

std::uint64_t hash_tensor(const Tensor& t, std::uint64_t h) noexcept {
  for (std::size_t d : t.shape()) {
    const std::uint64_t v = d;
    h = fnv1a(&v, sizeof v, h);
  }
  return fnv1a(t.ptr(), t.size() * sizeof(float), h);
}

Tensor normal_tensor(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

}  // namespace o2mag
