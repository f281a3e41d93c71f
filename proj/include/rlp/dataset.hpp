#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rlp/tensor.hpp"

namespace rlp {

struct ImageShape {
  std::size_t channels = 3, height = 8, width = 8;
  std::size_t numel() const { return channels * height * width; }
  Shape batch(std::size_t n) const { return {n, channels, height, width}; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Images in [0,1] with integer labels, stored contiguously.
class LabeledImages {
 public:
  LabeledImages() = default;
  LabeledImages(ImageShape shape, std::size_t num_classes);

  void push(std::span<const float> pixels, int label);

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  const ImageShape& shape() const { return shape_; }
  std::size_t num_classes() const { return num_classes_; }
  std::span<const float> pixels(std::size_t i) const;
  int label(std::size_t i) const { return labels_.at(i); }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<float>& raw() const { return pixels_; }

  /// One image as [1,C,H,W].
  Tensor image(std::size_t i) const;
  /// Images at `idx` as [B,C,H,W].
  Tensor batch(std::span<const std::size_t> idx) const;
  LabeledImages subset(std::span<const std::size_t> idx) const;
  std::vector<std::size_t> class_counts() const;

 private:
  ImageShape shape_;
  std::size_t num_classes_ = 0;
  std::vector<float> pixels_;
  std::vector<int> labels_;
};

/// Oriented-grating textures on a random per-channel background. Class
/// templates depend only on (classes, channels, height, width), so sets drawn
/// with different seeds share the same classes.
struct SyntheticTexturesSpec {
  std::size_t count = 200;
  std::size_t classes = 2;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 3;
  std::uint64_t seed = 1;
  float amplitude_lo = 0.03f;
  float amplitude_hi = 0.06f;
  float noise = 0.01f;
};

/// Labels are assigned round-robin, so count divisible by classes gives a
/// balanced set.
LabeledImages synthetic_textures(const SyntheticTexturesSpec& spec);

/// Reads CIFAR-10 binary batches: each record is one label byte followed by
/// 3072 bytes (1024 R, then G, then B, row-major 32x32).
LabeledImages read_cifar10_binary(const std::filesystem::path& path);

/// Picks n/classes images per class (first-come after a seeded shuffle).
/// Throws if n is not divisible by the class count or a class is short.
LabeledImages balanced_subset(const LabeledImages& data, std::size_t n, std::uint64_t seed);

/// Deterministic shuffled split into (train, held-out).
std::pair<LabeledImages, LabeledImages> split_holdout(const LabeledImages& data,
                                                      double heldout_fraction,
                                                      std::uint64_t seed);

/// Clean/adversarial image pairs produced by a white-box generator.
struct AdversarialPairs {
  std::string attack;
  ImageShape shape;
  std::vector<int> labels;
  std::vector<float> clean;
  std::vector<float> adversarial;
  std::size_t size() const { return labels.size(); }
};

// Pair file layout (little-endian): "PDS1" | u32 attack-name length | name |
// u32 count | u32 C | u32 H | u32 W | per record: u32 label, f32 clean[C*H*W],
// f32 adversarial[C*H*W].
void save_pairs(const std::filesystem::path& path, const AdversarialPairs& pairs);
AdversarialPairs load_pairs(const std::filesystem::path& path);

}  // namespace rlp
