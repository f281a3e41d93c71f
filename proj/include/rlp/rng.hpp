#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>

namespace rlp {

/// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derives a child key from a parent key and a tag. Distinct tags give
/// statistically independent streams.
constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t tag) {
  return mix64(key ^ mix64(tag ^ 0xD1B54A32D192ED03ULL));
}

/// Counter-based random stream.
///
/// The i-th draw is a pure function of (key, i), so a stream keyed by
/// (master seed, image index, query index) yields the same numbers no matter
/// how work is scheduled across threads. Normal variates use Box-Muller so
/// results do not depend on the standard library's distribution code.
class Stream {
 public:
  explicit Stream(std::uint64_t key = 0) : key_(mix64(key)) {}
  Stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

  /// Independent stream for a sub-task.
  Stream child(std::uint64_t tag) const;
  std::uint64_t key() const { return key_; }
  std::uint64_t position() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n);
  /// Standard normal.
  double normal();
  /// +1 or -1 with equal probability.
  int sign() { return (next_u64() >> 63) ? 1 : -1; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace rlp
