#pragma once

#include <cstdint>
#include <random>

namespace slm {

using Rng = std::mt19937_64;

// Uniform integer in [0, n). Rejection sampling keeps the result exact and
// independent of the standard library's distribution implementation.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = Rng::max() - (Rng::max() % n + 1) % n;
  std::uint64_t x = rng();
  while (x > limit) x = rng();
  return x % n;
}

// Uniform double in [0, 1) with 53 random bits.
inline double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline bool fair_bit(Rng& rng) { return (rng() >> 63) != 0; }

// Independent stream for a named purpose (init, dropout, ordering sampling,
// shuffling, ...), so that changing one consumer leaves the others intact.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

}  // namespace slm
