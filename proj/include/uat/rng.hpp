#pragma once

#include <cstdint>
#include <initializer_list>

namespace uat {

/// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Hash an ordered tuple of words into a stream key.
constexpr std::uint64_t derive_key(std::uint64_t base,
                                   std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t key = mix64(base ^ 0x243f6a8885a308d3ULL);
  for (std::uint64_t t : tags) {
    key = mix64(key ^ mix64(t + 0x9e3779b97f4a7c15ULL));
  }
  return key;
}

/// Counter-based random stream: draw i is a pure function of (seed, i).
///
/// Advancing the counter is the only state change, so a stream can be
/// copied to replay draws, and independent substreams are obtained with
/// `split` rather than by sharing one generator across consumers.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0) noexcept
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix64(seed_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;

  /// Standard normal via Box-Muller (consumes two draws).
  double normal() noexcept;

  RngStream split(std::initializer_list<std::uint64_t> tags) const noexcept {
    return RngStream(derive_key(seed_, tags));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace uat
