#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlp/dataset.hpp"
#include "rlp/graph.hpp"
#include "rlp/parameters.hpp"

namespace rlp {

enum class LayerKind { kConv, kRelu, kPool, kFlatten, kLinear };

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t out = 0;     // conv channels / linear width (last linear: num_classes)
  std::size_t kernel = 3;  // conv only
};

/// Classifier layer list. Text form is either a preset ("tiny-cnn", "linear")
/// or comma-separated layers: "conv:8:3,relu,pool,flatten,linear". The final
/// linear layer always maps to num_classes; "pool" is global average pooling.
struct Architecture {
  std::vector<LayerSpec> layers;

  static Architecture parse(std::string_view text);
  static Architecture tiny_cnn();
  static Architecture linear();
  std::string str() const;
};

/// Index of the largest score; ties go to the lowest index.
std::size_t argmax(std::span<const float> scores);

/// M_y - max_{j != y} M_j, or M_y - M_target when targeted. Negative means the
/// attack succeeded.
double margin_loss(std::span<const float> scores, std::size_t label,
                   std::optional<std::size_t> target = std::nullopt);

class Classifier {
 public:
  Classifier(Architecture arch, ImageShape input, std::size_t num_classes, std::uint64_t seed);
  /// Rebuilds a classifier around saved parameters.
  Classifier(Architecture arch, ImageShape input, std::size_t num_classes, ParameterSet params);

  const Architecture& architecture() const { return arch_; }
  const ImageShape& input_shape() const { return input_; }
  std::size_t num_classes() const { return num_classes_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Logits [N, num_classes]. With `train` the parameters are bound for
  /// gradient accumulation; otherwise they enter the graph as constants.
  Var logits(Graph& g, Var x, bool train = false);
  Var logits(Graph& g, Var x) const;

 private:
  template <typename Bind>
  Var forward(Graph& g, Var x, Bind&& bind) const;

  Architecture arch_;
  ImageShape input_;
  std::size_t num_classes_ = 0;
  ParameterSet params_;
};

/// Softmax scores [N, num_classes] for x of shape [N,C,H,W] (or [C,H,W]).
Tensor predict(const Classifier& c, const Tensor& x);
/// Fraction of `data` whose argmax prediction matches the label.
double accuracy(const Classifier& c, const LabeledImages& data);

struct ClassifierTrainConfig {
  std::size_t epochs = 30;
  float lr = 3e-3f;
  std::size_t batch = 32;
  std::uint64_t seed = 1;
  double heldout_fraction = 0.2;
  /// Gaussian input noise added to every training batch (0 = off).
  float noise_sigma = 0.0f;
};

struct TrainedClassifier {
  Classifier model;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
};

/// Thrown when the training loss becomes non-finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cross-entropy training with Adam. Deterministic for a given seed.
TrainedClassifier train_classifier(const LabeledImages& data, const Architecture& arch,
                                   const ClassifierTrainConfig& cfg);

enum class NormKind { kL2, kLinf };
std::string_view norm_name(NormKind n);
NormKind parse_norm(std::string_view s);

/// An image, its label, and the l_p ball the adversary must stay inside.
struct AttackProblem {
  Tensor x;  // [1,C,H,W] in [0,1]
  std::size_t label = 0;
  NormKind norm = NormKind::kLinf;
  double radius = 8.0 / 255.0;
  std::optional<std::size_t> target;

  void validate(std::size_t num_classes) const;
};

}  // namespace rlp
