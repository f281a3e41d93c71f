#include "rlp/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace rlp {

Tensor bit_reduce(const Tensor& x, int bits) {
  if (bits < 1 || bits > 8) throw std::invalid_argument("bit_reduce: bits must be in [1,8]");
  const float levels = static_cast<float>((1 << bits) - 1);
  Tensor out = x;
  out.set_requires_grad(false);
  for (float& v : out.data()) v = std::round(v * levels) / levels;
  return out;
}

Tensor median_smooth(const Tensor& x, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("median_smooth: kernel must be odd");
  if (x.rank() < 2) throw ShapeError("median_smooth needs spatial axes");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t plane = h * w, planes = plane ? x.numel() / plane : 0;
  const long r = kernel / 2;
  Tensor out(x.shape());
  std::vector<float> win(static_cast<std::size_t>(kernel * kernel));
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = x.data().data() + p * plane;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t c = 0; c < w; ++c) {
        std::size_t n = 0;
        for (long dy = -r; dy <= r; ++dy) {
          const long yy = std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(h) - 1);
          for (long dx = -r; dx <= r; ++dx) {
            const long xx = std::clamp<long>(static_cast<long>(c) + dx, 0, static_cast<long>(w) - 1);
            win[n++] = src[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
          }
        }
        std::nth_element(win.begin(), win.begin() + static_cast<long>(n / 2), win.begin() + static_cast<long>(n));
        out[p * plane + y * w + c] = win[n / 2];
      }
    }
  }
  return out;
}

Tensor gaussian_noise(const Tensor& x, double sigma, Stream& rng) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_noise: sigma must be non-negative");
  Tensor out = x;
  out.set_requires_grad(false);
  for (float& v : out.data())
    v = std::clamp(v + static_cast<float>(sigma * rng.normal()), 0.0f, 1.0f);
  return out;
}

Tensor shrink(const Tensor& x, double factor) {
  Tensor out = x;
  out.set_requires_grad(false);
  for (float& v : out.data()) v = static_cast<float>(factor * v);
  return out;
}

Tensor HeuristicTransform::apply(const Tensor& x, Stream& rng) const {
  switch (kind) {
    case TransformKind::kBitReduce: return bit_reduce(x, bits);
    case TransformKind::kMedianSmooth: return median_smooth(x, kernel);
    case TransformKind::kGaussianNoise: return gaussian_noise(x, sigma, rng);
    case TransformKind::kShrink: return shrink(x, factor);
  }
  return x;
}

std::string HeuristicTransform::name() const {
  switch (kind) {
    case TransformKind::kBitReduce: return "bit-reduce-" + std::to_string(bits);
    case TransformKind::kMedianSmooth: return "median-" + std::to_string(kernel);
    case TransformKind::kGaussianNoise: return "gaussian-noise";
    case TransformKind::kShrink: return "shrink";
  }
  return "?";
}

}  // namespace rlp
