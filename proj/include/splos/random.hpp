#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace splos {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for a named sub-stream, e.g. derive_seed(run_seed, {kPretrainStream, k}).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix_seed(base);
  for (auto p : path) s = mix_seed(s ^ mix_seed(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> path = {}) {
  return Rng(derive_seed(base, path));
}

// Stream tags.
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kPretrainStream = 2;
inline constexpr std::uint64_t kDmcStream = 3;
inline constexpr std::uint64_t kCmmcStream = 4;
inline constexpr std::uint64_t kThresholdStream = 5;
inline constexpr std::uint64_t kJitterStream = 6;
inline constexpr std::uint64_t kPairingStream = 7;
inline constexpr std::uint64_t kAuditStream = 8;
inline constexpr std::uint64_t kDataStream = 9;

}  // namespace splos
