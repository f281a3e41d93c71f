#pragma once

#include <cstdint>
#include <string_view>

#include "rlp/dataset.hpp"
#include "rlp/models.hpp"

namespace rlp {

/// White-box generators used to build purifier training data.
enum class WhiteBoxMethod { kFgsm, kPgd, kBim };

std::string_view whitebox_name(WhiteBoxMethod m);
WhiteBoxMethod parse_whitebox(std::string_view s);

struct WhiteBoxConfig {
  WhiteBoxMethod method = WhiteBoxMethod::kPgd;
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  std::size_t steps = 10;
  std::uint64_t seed = 0;
  /// PGD only: start from a uniform draw in the ball instead of x.
  bool random_start = true;

  void validate() const;
};

/// d CE(c(x), y) / dx for a batch x [N,C,H,W].
Tensor input_gradient(const Classifier& c, const Tensor& x, std::span<const int> labels);

/// Clamps v into the l_inf ball of radius eps around x, then into [0,1].
void project_linf(std::span<float> v, std::span<const float> x, double eps);

/// clamp(x + eps * sign(grad CE), 0, 1). Works on a batch; labels per row.
Tensor fgsm(const Classifier& c, const Tensor& x, std::span<const int> labels, double epsilon);
/// Iterated signed-gradient steps with projection, starting from a seeded
/// uniform point in the ball. Row i draws from stream (seed, i).
Tensor pgd(const Classifier& c, const Tensor& x, std::span<const int> labels,
           const WhiteBoxConfig& cfg);
/// PGD without the random start.
Tensor bim(const Classifier& c, const Tensor& x, std::span<const int> labels,
           const WhiteBoxConfig& cfg);

/// Runs `cfg.method` over every image of `data` in chunks.
AdversarialPairs generate_pairs(const Classifier& c, const LabeledImages& data,
                                const WhiteBoxConfig& cfg);

}  // namespace rlp
