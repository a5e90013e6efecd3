#pragma once

#include <cmath>
#include <cstdint>

namespace unimod {

// Counter-based deterministic random stream.
//
// Draw k of a stream with seed s is splitmix64_mix(s + (k+1)*GAMMA), i.e. the
// classic splitmix64 sequence started at state s. Because each draw is a pure
// function of (seed, counter), streams can be reconstructed from a seed and a
// draw count alone, which is what makes checkpoint resume bit-exact. All
// integer arithmetic is exact; float conversions use fixed power-of-two
// scaling, so samples are bit-identical across runs at the same precision.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

  // Independent child stream identified by a tag. Children of distinct tags
  // (and of distinct parents) are decorrelated by the mixer.
  RandomStream child(std::uint64_t tag) const {
    return RandomStream(mix(seed_ ^ mix(tag + 0x632BE59BD9B4E019ULL)));
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(seed_ + counter_ * kGamma);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in the open interval (0, 1); safe as a log() argument.
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Fixed-point multiply; bias is < n / 2^64 and
  // exactly zero when n is a power of two.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller. Draws two uniforms per sample so the
  // counter advances by a fixed amount regardless of the value.
  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Gumbel(0, 1) sample: -log(-log(u)).
  double gumbel() { return -std::log(-std::log(uniform_open())); }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace unimod
