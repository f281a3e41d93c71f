#pragma once

#include <string>

#include "rlp/rng.hpp"
#include "rlp/tensor.hpp"

namespace rlp {

/// round(x * (2^bits - 1)) / (2^bits - 1), bits in [1, 8].
Tensor bit_reduce(const Tensor& x, int bits);
/// Per-channel k x k median over the two trailing axes, edges replicated.
Tensor median_smooth(const Tensor& x, int kernel);
/// clamp(x + sigma * n, 0, 1) with n drawn from `rng`.
Tensor gaussian_noise(const Tensor& x, double sigma, Stream& rng);
/// factor * x. Deterministic shrinkage used by the acceleration experiment.
Tensor shrink(const Tensor& x, double factor);

enum class TransformKind { kBitReduce, kMedianSmooth, kGaussianNoise, kShrink };

struct HeuristicTransform {
  TransformKind kind = TransformKind::kGaussianNoise;
  int bits = 4;
  int kernel = 3;
  double sigma = 0.041;
  double factor = 0.5;

  bool randomized() const { return kind == TransformKind::kGaussianNoise; }
  /// `rng` is only read by randomized transforms.
  Tensor apply(const Tensor& x, Stream& rng) const;
  std::string name() const;
};

}  // namespace rlp
