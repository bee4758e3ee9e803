#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace pem {

// splitmix64; used to spread a master seed into independent per-actor seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d4a2ca9529a885ULL;
  return z ^ (z >> 31);
}

// Derive a child seed from (master, stream index). Two distinct (master, index)
// pairs give statistically independent mt19937_64 streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t s = master ^ (0x100000001b3ULL * (index + 1));
  std::uint64_t a = splitmix64(s);
  std::uint64_t b = splitmix64(s);
  return a ^ (b << 1);
}

// Named stream for harness-level consumers (mc-acceptance, channel, init, ...).
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  return derive_seed(master, h);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t master, std::uint64_t index) {
  return Rng(derive_seed(master, index));
}
inline Rng make_rng(std::uint64_t master, std::string_view name) {
  return Rng(derive_seed(master, name));
}

}  // namespace pem
