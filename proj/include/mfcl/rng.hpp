#pragma once

// Counter-based random number generation (Philox4x64-10).
//
// Every draw is a pure function of (seed, stream role, replication, particle,
// step, lane), so simulations are reproducible bitwise for any thread count
// and coupled systems can share noise streams exactly.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace mfcl {

struct Philox4x64 {
  // Multipliers and Weyl constants of the Philox4x64 round function.
  static constexpr std::uint64_t kMul0 = 0xD2E7470EE14C6C93ULL;
  static constexpr std::uint64_t kMul1 = 0xCA5A826395121157ULL;
  static constexpr std::uint64_t kWeyl0 = 0x9E3779B97F4A7C15ULL;
  static constexpr std::uint64_t kWeyl1 = 0xBB67AE8584CAA73BULL;

  static inline void mulhilo(std::uint64_t a, std::uint64_t b,
                             std::uint64_t& hi, std::uint64_t& lo) {
    const unsigned __int128 p = static_cast<unsigned __int128>(a) * b;
    hi = static_cast<std::uint64_t>(p >> 64);
    lo = static_cast<std::uint64_t>(p);
  }

  // One block: 4 output words from a 256-bit counter and 128-bit key.
  static std::array<std::uint64_t, 4> block(std::array<std::uint64_t, 4> ctr,
                                            std::array<std::uint64_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
      std::uint64_t hi0, lo0, hi1, lo1;
      mulhilo(kMul0, ctr[0], hi0, lo0);
      mulhilo(kMul1, ctr[2], hi1, lo1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }
};

// Stream roles keep noise sources (common noise, idiosyncratic noise,
// initial conditions, auxiliary reference clouds, ...) independent.
enum class StreamRole : std::uint64_t {
  kCommon = 1,
  kIdiosyncratic = 2,
  kInitial = 3,
  kReference = 4,
  kScratch = 5,
};

inline double uniform_from_bits(std::uint64_t x) {
  // in [2^-53, 1]; strictly positive so it is safe under log().
  return static_cast<double>((x >> 11) + 1) * 0x1.0p-53;
}

// One Philox block mapped to two standard normals (Box-Muller on lanes
// 0/1) plus the raw words for callers needing uniforms.
struct NoiseBlock {
  std::array<std::uint64_t, 4> words;

  double uniform(int lane) const { return uniform_from_bits(words[lane]); }

  std::array<double, 2> normals() const {
    const double u1 = uniform(0);
    const double u2 = uniform(1);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(a), r * std::sin(a)};
  }
};

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  NoiseBlock at(StreamRole role, std::uint64_t replication,
                std::uint64_t particle, std::uint64_t step,
                std::uint64_t lane_block = 0) const {
    return NoiseBlock{Philox4x64::block(
        {replication, particle, step, lane_block},
        {seed_, static_cast<std::uint64_t>(role)})};
  }

  // Up to two N(0,1) draws per (role, replication, particle, step) cell.
  std::array<double, 2> normals(StreamRole role, std::uint64_t replication,
                                std::uint64_t particle,
                                std::uint64_t step) const {
    return at(role, replication, particle, step).normals();
  }

 private:
  std::uint64_t seed_;
};

}  // namespace mfcl
