#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rlp/models.hpp"
#include "rlp/pool.hpp"
#include "rlp/transforms.hpp"

namespace rlp {

/// Pre-processor placed in front of the classifier. Immutable and cheap to
/// copy; pools are shared.
class Defense {
 public:
  enum class Kind { kNone, kTransform, kPurifier, kPatchwise, kEnsemble };

  static Defense none();
  static Defense transform(HeuristicTransform t);
  static Defense purifier(std::shared_ptr<const PurifierPool> single);
  static Defense patchwise(std::shared_ptr<const PurifierPool> pool, std::size_t rows,
                           std::size_t cols);
  static Defense ensemble(std::shared_ptr<const PurifierPool> pool);

  Kind kind() const { return kind_; }
  bool randomized() const;
  const std::string& name() const { return name_; }
  Defense renamed(std::string name) const;

  /// Applies the defense to one image; `rng` is the per-query stream.
  Tensor apply(const Tensor& x, Stream& rng, PurifyStats* stats = nullptr) const;

 private:
  Kind kind_ = Kind::kNone;
  HeuristicTransform transform_;
  std::shared_ptr<const PurifierPool> pool_;
  std::size_t rows_ = 3, cols_ = 3;
  std::string name_ = "none";
};

enum class OutputMode { kScores, kLabel };

/// Query-counting black box: defense then classifier.
///
/// Query i draws its defense randomness from Stream(root, {i}), so results do
/// not depend on how images are scheduled. Once `budget` queries have been
/// forwarded every further call returns nullopt without evaluating anything.
class DefendedOracle {
 public:
  DefendedOracle(const Classifier& classifier, Defense defense, OutputMode mode,
                 std::size_t budget, std::uint64_t stream_root);

  /// Softmax of the classifier on the defended input. Scores mode only.
  std::optional<std::vector<float>> scores(const Tensor& x);
  /// Predicted label. Available in both modes.
  std::optional<std::size_t> label(const Tensor& x);

  OutputMode mode() const { return mode_; }
  std::size_t queries() const { return queries_; }
  std::size_t budget() const { return budget_; }
  std::size_t remaining() const { return budget_ - queries_; }
  bool exhausted() const { return queries_ >= budget_; }
  const Defense& defense() const { return defense_; }
  std::size_t num_classes() const { return classifier_->num_classes(); }

 private:
  std::optional<std::vector<float>> forward(const Tensor& x);

  const Classifier* classifier_;
  Defense defense_;
  OutputMode mode_;
  std::size_t budget_;
  std::uint64_t root_;
  std::size_t queries_ = 0;
};

enum class AttackKind { kNes, kSimba, kSquare, kBoundary, kHopSkipJump };
std::string_view attack_name(AttackKind k);
AttackKind parse_attack(std::string_view s);
OutputMode attack_mode(AttackKind k);

struct NesParams {
  double lr = 0.01;
  std::size_t samples = 100;  // queries per estimate, drawn as samples/2 antithetic pairs
  double sigma = 0.001;       // smoothing radius
};

struct SimbaParams {
  double step = 0.2;
};

struct SquareParams {
  double p_init = 0.05;  // initial fraction of pixels changed, in [0.05, 0.5]
};

struct BoundaryParams {
  double spherical_step = 0.01;
  double source_step = 0.01;
  double source_step_convergence = 1e-7;
  double step_adaptation = 1.5;
  std::size_t stats_every = 10;
  double init_fraction = 0.1;  // share of the budget reserved for finding a start
  bool stop_at_success = true;
};

struct HsjParams {
  std::size_t n_est = 100;
  double gamma = 1.0;
  double init_fraction = 0.1;
  bool stop_at_success = true;
};

struct AttackConfig {
  AttackKind kind = AttackKind::kSquare;
  NesParams nes;
  SimbaParams simba;
  SquareParams square;
  BoundaryParams boundary;
  HsjParams hsj;
};

/// One oracle evaluation seen by the attack.
struct TracePoint {
  std::size_t query = 0;  // oracle counter after the query
  double value = 0.0;     // margin (score attacks) or distance to x (decision attacks)
  bool accepted = false;
  double norm = 0.0;      // perturbation norm of the evaluated point
};

struct AttackOutcome {
  bool success = false;
  bool failed_init = false;
  std::size_t queries = 0;
  std::optional<std::size_t> success_query;  // oracle counter at the first successful query
  double norm = 0.0;                         // of best - x in the problem's norm
  Tensor best;
  std::vector<TracePoint> trace;
  std::map<std::string, std::size_t> phase_queries;
  /// HSJ only: boundary-normal estimates of each outer iteration.
  std::vector<std::vector<float>> hsj_directions;
};

/// Perturbation norm of a - b in the given norm.
double perturbation_norm(std::span<const float> a, std::span<const float> b, NormKind norm);
/// Projects v into N_R(x) intersected with [0,1]^d.
void project_ball(std::span<float> v, std::span<const float> x, NormKind norm, double radius);

AttackOutcome nes_attack(DefendedOracle& o, const AttackProblem& p, const NesParams& prm, Stream& rng);
AttackOutcome simba_attack(DefendedOracle& o, const AttackProblem& p, const SimbaParams& prm, Stream& rng);
AttackOutcome square_attack(DefendedOracle& o, const AttackProblem& p, const SquareParams& prm, Stream& rng);
AttackOutcome boundary_attack(DefendedOracle& o, const AttackProblem& p, const BoundaryParams& prm,
                              Stream& rng);
AttackOutcome hopskipjump_attack(DefendedOracle& o, const AttackProblem& p, const HsjParams& prm,
                                 Stream& rng);
AttackOutcome run_attack(DefendedOracle& o, const AttackProblem& p, const AttackConfig& cfg, Stream& rng);

/// p-fraction at iteration `it` of `n_iters` on the halving schedule.
double square_p_schedule(double p_init, std::size_t it, std::size_t n_iters);

/// Attack runs over an image set; image i uses oracle stream (seed, i, 1) and
/// attack stream (seed, i, 2).
struct EvaluationResult {
  std::vector<AttackOutcome> outcomes;
  std::vector<std::size_t> image_ids;
  double robust_accuracy = 0.0;
};

EvaluationResult evaluate_attack(const Classifier& c, const Defense& defense, const LabeledImages& images,
                                 const AttackConfig& cfg, std::size_t budget, NormKind norm,
                                 double radius, std::uint64_t seed, std::size_t jobs = 1);

/// Fraction of images not yet broken after q queries, for each q in `grid`.
std::vector<double> robust_curve(const EvaluationResult& r, std::span<const std::size_t> grid);

/// Trace CSV: image_id,query_index,margin_or_distance,accepted,norm
void write_trace_csv(std::ostream& os, const EvaluationResult& r);

}  // namespace rlp
