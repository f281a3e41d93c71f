#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rlp/attacks.hpp"
#include "rlp/config.hpp"
#include "rlp/pool.hpp"
#include "rlp/theory.hpp"

namespace rlp {

LabeledImages load_dataset(const DatasetConfig& spec, bool test_split, std::uint64_t seed);

void save_classifier(const std::filesystem::path& dir, const Classifier& c);
Classifier load_classifier(const std::filesystem::path& dir);

/// Trained artifacts of one configuration. Each stage is cached under
/// <out>/artifacts/<stage>-<key>, where the key hashes the settings the stage
/// depends on; a cached stage is loaded instead of retrained.
struct Artifacts {
  LabeledImages train, test;
  std::shared_ptr<Classifier> classifier;
  std::map<WhiteBoxMethod, AdversarialPairs> pairs;
  std::shared_ptr<PurifierPool> pool;  // all trained members
  std::map<std::string, std::string> checkpoint_hashes;  // relative path -> git blob hash
};

/// Runs (or loads) the stages up to and including `stage`: "data",
/// "classifier", "advdata" or "pool".
Artifacts prepare(const ExperimentConfig& cfg, const std::string& stage);

/// Builds a defense by its config name.
Defense make_defense(const std::string& name, const Artifacts& a, const ExperimentConfig& cfg);

struct RobustRow {
  std::string defense, attack;
  NormKind norm = NormKind::kLinf;
  std::size_t budget = 0;
  double robust_accuracy = 0.0;
  double median_queries = 0.0;  // over all images, unbroken ones counted as budget + 1
};

struct CleanRow {
  std::string defense;
  double clean_accuracy = 0.0;
};

struct CurveRow {
  std::string attack;
  std::size_t budget = 0, query = 0;
  double robust_accuracy = 0.0;
};

struct SweepRow {
  std::size_t K = 0, seed = 0;
  double nu_hat = 0.0;
  double robust_accuracy = 0.0, median_queries = 0.0;
};

struct LatencyRow {
  std::string method;
  std::size_t pool_size = 0;
  double median_ms = 0.0, p90_ms = 0.0;
  std::uint64_t encoder_pixels = 0;  // per image
};

struct CellFailure {
  std::string defense, attack;
  std::size_t budget = 0;
  std::string error;
};

struct RunReport {
  std::set<std::string> sections_run;  // "attacks", "clean", "sweep", "theory", "bench"
  std::string config_hash;
  std::string canonical_config;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> checkpoint_hashes;
  std::vector<RobustRow> robust;
  std::vector<CleanRow> clean;
  std::map<std::string, std::vector<CurveRow>> curves;  // per defense
  std::vector<SweepRow> sweep;
  std::vector<theory::TheoremRow> theorem1, theorem2;
  std::vector<LatencyRow> latency;
  std::vector<CellFailure> failures;
  std::map<std::string, std::string> traces;  // file name -> trace CSV text
};

/// Median of per-image queries-to-success, unbroken images counted as budget + 1.
double median_queries_to_success(const EvaluationResult& r, std::size_t budget);

/// Clean accuracy of a defended classifier; randomized defenses are averaged
/// over `draws` per image.
double defended_clean_accuracy(const Classifier& c, const Defense& d, const LabeledImages& data,
                               std::uint64_t seed, std::size_t draws = 3);

/// The defense x attack x budget grid. Per-cell errors land in `failures`.
void run_attack_grid(const ExperimentConfig& cfg, const Artifacts& a, RunReport& report);
void run_clean(const ExperimentConfig& cfg, const Artifacts& a, RunReport& report);
/// Patchwise robustness for pool prefixes of growing size.
void run_sweep(const ExperimentConfig& cfg, const Artifacts& a, RunReport& report);
/// Both theorem experiments. The trained-pool rows of the second need `a.pool`.
void run_theory(const ExperimentConfig& cfg, const Artifacts* a, RunReport& report);

/// Per-inference wall time of patchwise and ensemble purification, batch 1,
/// on a random bench.height x bench.width frame. Members beyond the trained
/// pool are an error.
std::vector<LatencyRow> latency_bench(const ExperimentConfig& cfg, const PurifierPool& pool);

/// Everything but the latency bench.
RunReport run_experiment(const ExperimentConfig& cfg);

/// Writes the CSVs present in `report`, SVG charts and provenance.json into
/// `dir`, plus run_meta.json holding the timestamp.
void emit_report(const RunReport& report, const std::filesystem::path& dir);

// Individual writers, exposed for tests.
void write_robust_csv(std::ostream& os, const std::vector<RobustRow>& rows);
void write_queries_csv(std::ostream& os, const std::vector<RobustRow>& rows);
void write_failures_csv(std::ostream& os, const std::vector<CellFailure>& rows);
void write_clean_csv(std::ostream& os, const std::vector<CleanRow>& rows);
void write_curve_csv(std::ostream& os, const std::vector<CurveRow>& rows);
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);
void write_theorem_csv(std::ostream& os, const std::vector<theory::TheoremRow>& rows);
/// Rows with a note only ("skipped", "vacuous").
void write_theorem_notes_csv(std::ostream& os, const std::vector<theory::TheoremRow>& rows);
void write_latency_csv(std::ostream& os, const std::vector<LatencyRow>& rows);

struct Series {
  std::string name;
  std::vector<double> x, y;
};
/// Line chart, one polyline per series.
void write_svg_chart(std::ostream& os, const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<Series>& series);

}  // namespace rlp
