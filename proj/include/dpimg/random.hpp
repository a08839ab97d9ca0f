#pragma once

#include <array>
#include <bit>
#include <cstdint>

namespace dpimg {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11). The output of
// block `counter` under `key` is a pure function of both, so any draw can be
// computed without generating the ones before it.
class Philox4x32 {
 public:
  using Block = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Block Generate(Block counter, Key key) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kWeyl0;
        key[1] += kWeyl1;
      }
      const std::uint64_t p0 = std::uint64_t{kMul0} * counter[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * counter[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const auto lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const auto lo1 = static_cast<std::uint32_t>(p1);
      counter = {hi1 ^ counter[1] ^ key[0], lo1, hi0 ^ counter[3] ^ key[1], lo0};
    }
    return counter;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85;
};

// One independent stream of uniforms: key = seed, counter = (draw, stream).
// Draw i of stream s is Philox(key=seed, counter={i, s}); each uniform
// consumes exactly one counter value.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        stream_(stream) {}

  std::uint64_t NextU64() {
    const Philox4x32::Block out = Philox4x32::Generate(
        {static_cast<std::uint32_t>(draws_), static_cast<std::uint32_t>(draws_ >> 32),
         static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
        key_);
    ++draws_;
    return std::uint64_t{out[0]} | (std::uint64_t{out[1]} << 32);
  }

  // Uniform on the open interval (0, 1): (k + 0.5) / 2^53 for 53-bit k.
  double NextOpenUnit() {
    const std::uint64_t k = NextU64() >> 11;
    return (static_cast<double>(k) + 0.5) * 0x1.0p-53;
  }

  std::uint64_t draws() const { return draws_; }
  std::uint64_t stream() const { return stream_; }

 private:
  Philox4x32::Key key_;
  std::uint64_t stream_;
  std::uint64_t draws_ = 0;
};

// SplitMix64 finalizer; used to derive per-cell seeds from a master seed.
inline std::uint64_t MixSeed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t DeriveSeed(std::uint64_t master, double epsilon, std::uint64_t d) {
  std::uint64_t h = MixSeed(master);
  h = MixSeed(h ^ std::bit_cast<std::uint64_t>(epsilon));
  return MixSeed(h ^ d);
}

}  // namespace dpimg
