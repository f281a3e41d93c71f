#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>

#include "rlp/dataset.hpp"
#include "rlp/graph.hpp"
#include "rlp/kernels.hpp"
#include "rlp/parameters.hpp"

namespace rlp {

/// Encoder families. Both are stacks of spatial-size-preserving residual
/// blocks; rcan-lite additionally gates each block's residual per channel.
enum class EncoderFamily { kEdsrLite, kRcanLite };

std::string_view family_name(EncoderFamily f);
/// Short tag used in purifier names ("EDSR" / "RCAN").
std::string_view family_tag(EncoderFamily f);
EncoderFamily parse_family(std::string_view s);

struct PurifierProvenance {
  std::string attack = "none";  // white-box generator of the training pairs
  EncoderFamily family = EncoderFamily::kEdsrLite;
  std::size_t depth = 32;
  std::uint64_t seed = 0;
};

/// Work counters for the purification paths.
struct PurifyStats {
  /// Pixels pushed through an encoder, summed over every encoder invocation.
  std::uint64_t encoder_pixels = 0;
  std::uint64_t images = 0;
};

/// Local implicit purifier: a convolutional encoder producing a depth-D
/// feature per pixel and a per-pixel MLP decoder mapping that feature to a
/// colour, clamped to [0,1].
///
/// Encoder: head conv3x3 (C->D), kBlocks residual blocks
/// h += [gate *] conv3x3(relu(conv3x3(h))), then a skip from the head output.
/// The rcan-lite gate is clamp(W2 relu(W1 mean_hw(r) + b1) + b2, 0, 1).
/// Decoder: 1x1 conv D->kDecoderHidden, relu, 1x1 conv ->C.
class Purifier {
 public:
  static constexpr std::size_t kBlocks = 2;
  static constexpr std::size_t kDecoderHidden = 32;

  Purifier(EncoderFamily family, std::size_t depth, std::uint64_t seed, std::size_t channels = 3);
  Purifier(PurifierProvenance provenance, std::size_t channels, ParameterSet params);

  const PurifierProvenance& provenance() const { return prov_; }
  PurifierProvenance& provenance() { return prov_; }
  EncoderFamily family() const { return prov_.family; }
  std::size_t depth() const { return prov_.depth; }
  std::size_t channels() const { return channels_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Differentiable forward on [N,C,H,W]; parameters are bound for training
  /// when `train` is set.
  Var forward(Graph& g, Var x, bool train);
  Var forward(Graph& g, Var x) const;
  /// Encoder features [N,D,H,W] through the graph.
  Var encode(Graph& g, Var x) const;

 private:
  template <typename Bind>
  Var encode_impl(Graph& g, Var x, Bind&& bind) const;
  template <typename Bind>
  Var decode_impl(Graph& g, Var feat, Bind&& bind) const;

  PurifierProvenance prov_;
  std::size_t channels_ = 3;
  ParameterSet params_;
};

Purifier build_purifier(std::string_view family, std::size_t depth, std::uint64_t seed,
                        std::size_t channels = 3);

/// Inference copy of a purifier with its conv kernels stored transposed
/// ([patch_len, out_ch]) for the pixel-major kernels.
class PackedPurifier {
 public:
  explicit PackedPurifier(const Purifier& p);

  EncoderFamily family() const { return family_; }
  std::size_t depth() const { return depth_; }
  std::size_t channels() const { return channels_; }
  const float* get(const std::string& name) const;

 private:
  EncoderFamily family_;
  std::size_t depth_, channels_;
  std::map<std::string, std::vector<float>, std::less<>> tensors_;
};

/// A rectangle of the image handled by one pool member.
struct RegionAssignment {
  kernels::Rect rect;
  std::size_t member = 0;
};

/// Encodes one image [C,H,W] (span of C*H*W floats) with a member per region.
///
/// Every layer is evaluated once over the full frame, each pixel with the
/// weights of its region's member. A conv tap that lands on a pixel owned by a
/// different member reads zero, so a member sees the union of its regions as a
/// zero-padded image of its own; rcan gating pools over those pixels only.
/// Regions must tile the frame and all members must share depth and channel
/// count. Returns features [D,H,W].
std::vector<float> encode_regions(std::span<const PackedPurifier* const> members,
                                  std::span<const float> image, std::size_t height,
                                  std::size_t width, std::span<const RegionAssignment> regions,
                                  PurifyStats* stats = nullptr);

/// Decodes the pixels listed per member; pixel_sets[m] holds flat pixel
/// indices for members[m]. Writes clamped colours into out [C,H,W].
void decode_pixels(std::span<const PackedPurifier* const> members, std::span<const float> features,
                   std::size_t height, std::size_t width,
                   std::span<const std::vector<std::uint32_t>> pixel_sets, std::span<float> out);

/// Deterministic whole-image purification of x [1,C,H,W] (or [C,H,W]).
Tensor purify_full(const Purifier& p, const Tensor& x, PurifyStats* stats = nullptr);

struct PurifierTrainConfig {
  float lambda = 0.0f;  // weight of the clean-fidelity term
  int p_norm = 1;       // 1: mean absolute error, 2: mean squared error
  std::size_t epochs = 20;
  float lr = 2e-3f;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
  double heldout_fraction = 0.2;
};

struct PurifierTrainReport {
  double heldout_l1 = 0.0;  // mean per-pixel |x - m(x')| on held-out pairs
  double final_loss = 0.0;
};

/// E|x - m(x')|_p + lambda * E|x - m(x)|_p over a batch. The fidelity term is
/// only recorded when lambda != 0 or `force_fidelity_term` is set.
Var purifier_loss(Graph& g, Purifier& p, const Tensor& clean, const Tensor& adversarial,
                  float lambda, int p_norm, bool force_fidelity_term = false);

/// Trains `p` in place on (clean, adversarial) pairs. Deterministic per seed.
PurifierTrainReport train_purifier(Purifier& p, const AdversarialPairs& pairs,
                                   const PurifierTrainConfig& cfg);

}  // namespace rlp
