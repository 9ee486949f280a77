#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace vaelasso {

using Rng = std::mt19937_64;

/// Independent generator for sub-stream `stream` of `seed`. The mapping is a
/// pure function of (seed, stream), so work split by counter is order-free.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x5eedu};
  return Rng(seq);
}

/// Derives a named child seed (e.g. "simulation", "training") from a master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(master),
                                   static_cast<std::uint32_t>(master >> 32)};
  for (char c : label) words.push_back(static_cast<unsigned char>(c));
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace vaelasso
