#pragma once

#include <cstdint>
#include <random>

namespace ctncf {

using Rng = std::mt19937_64;

// Independent stream per (seed, a, b, c) tuple. Used wherever a result must
// not depend on how many draws some unrelated consumer made before it.
inline Rng make_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                    std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(c),    static_cast<std::uint32_t>(c >> 32)};
  return Rng(seq);
}

// Stream tags so different consumers of one seed never collide.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kSplit = 2;
inline constexpr std::uint64_t kNegatives = 3;
inline constexpr std::uint64_t kShuffle = 4;
inline constexpr std::uint64_t kEvalNegatives = 5;
}  // namespace stream

}  // namespace ctncf
