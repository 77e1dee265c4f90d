#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

#include "o2mag/numerics/tensor.hpp"

namespace o2mag {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent seed lineages.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_string(std::string_view s) noexcept;

/// Seed derived from a parent seed and a path of labels/indices.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t index = 0) noexcept;

/// 64-bit FNV-1a over raw bytes, for content-addressed caches.
std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept;
std::uint64_t hash_tensor(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept;

Tensor normal_tensor(Rng& rng, Shape shape);

}  // namespace o2mag
