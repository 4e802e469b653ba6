#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mxml {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent substream seeds: derive_seed(base, "eval", domain, episode).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) { return splitmix64(base ^ splitmix64(salt)); }

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  // FNV-1a over the tag.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return derive_seed(base, h);
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t first, Rest... rest) {
  std::uint64_t s = derive_seed(derive_seed(base, tag), first);
  ((s = derive_seed(s, static_cast<std::uint64_t>(rest))), ...);
  return s;
}

}  // namespace mxml
