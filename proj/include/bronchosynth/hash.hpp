#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace bsynth {

// 64-bit FNV-1a. Used for fingerprints and split assignment, never for security.
constexpr std::uint64_t fnv1a(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char ch : data) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// splitmix64 finalizer; spreads small input differences over all bits.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string hex_digest(std::string_view data);

}  // namespace bsynth
