#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace profpred {

/// splitmix64 finalizer. All randomness in the library is drawn from
/// generators seeded through derive_seed, so any stream is a pure function
/// of (root seed, counters).
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = mix64(root);
  for (auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

/// FNV-1a, used for stable id-hash splits.
constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace profpred
