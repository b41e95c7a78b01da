#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace gapa {

using Rng = std::mt19937_64;

/// SplitMix64 finaliser.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Counter-based child seed: stage `counter` of root seed `root`.
inline std::uint64_t split_seed(std::uint64_t root, std::uint64_t counter) {
  return mix64(mix64(root) ^ mix64(counter + 0x632BE59BD9B4E019ULL));
}

/// Child seed keyed by a stage name (FNV-1a of the name as counter).
inline std::uint64_t split_seed(std::uint64_t root, std::string_view stage) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : stage) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return split_seed(root, h);
}

}  // namespace gapa
