#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sra {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives an independent seed for a named stream from a root seed, so
/// subsystems stay reproducible when others change how much randomness they draw.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) noexcept {
  return mix64(root ^ mix64(fnv1a(stream)));
}

constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                                    std::uint64_t index) noexcept {
  return mix64(derive_seed(root, stream) + mix64(index));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::string_view stream) {
  return Rng(derive_seed(root, stream));
}

template <typename T = double>
T uniform(Rng& rng, T lo, T hi) {
  return std::uniform_real_distribution<T>(lo, hi)(rng);
}

template <typename T = double>
T normal(Rng& rng, T mean = T{0}, T stddev = T{1}) {
  return std::normal_distribution<T>(mean, stddev)(rng);
}

}  // namespace sra
