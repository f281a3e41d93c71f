#include "rlp/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rlp {

Stream::Stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path)
    : key_(mix64(seed)) {
  for (std::uint64_t tag : path) key_ = derive_key(key_, tag);
}

Stream Stream::child(std::uint64_t tag) const {
  Stream s;
  s.key_ = derive_key(key_, tag);
  return s;
}

std::uint64_t Stream::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
}

double Stream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::size_t Stream::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Stream::below: empty range");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  // Rejection keeps the draw unbiased for every n.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return static_cast<std::size_t>(v % bound);
}

double Stream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

}  // namespace rlp
