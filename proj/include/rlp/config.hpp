#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rlp/attacks.hpp"
#include "rlp/dataset.hpp"
#include "rlp/models.hpp"
#include "rlp/purifier.hpp"
#include "rlp/theory.hpp"
#include "rlp/whitebox.hpp"

namespace rlp {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::string kind = "synthetic-textures";  // or "cifar10-binary"
  // Training set; the test set reuses it with its own seed and test_count.
  // Fainter gratings than the generator default: at 0.03-0.06 the toy
  // classifier is already robust to 8/255 and there is nothing to defend.
  SyntheticTexturesSpec synthetic{.count = 400, .amplitude_lo = 0.02f, .amplitude_hi = 0.04f};
  std::size_t test_count = 40;
  std::filesystem::path train_path, test_path;  // cifar10-binary
  std::size_t train_subset = 0, test_subset = 0; // balanced subsets, 0 = keep all
};

struct ClassifierConfig {
  std::string architecture = "tiny-cnn";
  ClassifierTrainConfig train;
};

struct PoolConfig {
  std::size_t depth = 32;
  std::size_t members = 6;  // members used by the purifier defenses
  std::size_t extra = 4;    // trained beyond the factor grid, for the sweep and the bench
  PurifierTrainConfig train{.lambda = 1.0f};
  WhiteBoxConfig whitebox;
  std::size_t grid_rows = 2, grid_cols = 2;
  std::size_t probes = 10;
};

struct AttackEntry {
  AttackKind kind = AttackKind::kSquare;
  NormKind norm = NormKind::kLinf;
};

struct AttackGridConfig {
  std::vector<std::string> defenses{"none", "gaussian-noise", "median-3", "purifier", "patchwise"};
  std::vector<AttackEntry> attacks{{AttackKind::kNes, NormKind::kLinf},
                                   {AttackKind::kSimba, NormKind::kL2},
                                   {AttackKind::kSquare, NormKind::kLinf},
                                   {AttackKind::kBoundary, NormKind::kL2},
                                   {AttackKind::kHopSkipJump, NormKind::kLinf}};
  std::vector<std::size_t> budgets{200, 2500};
  double linf_radius = 8.0 / 255.0;
  double l2_radius = 1.0;
  std::size_t images = 20;  // first n test images
  std::size_t curve_points = 50;
  bool write_traces = false;  // per-cell query traces under traces/
  AttackConfig params;
};

/// Queries-to-success against the patchwise defense for growing pool prefixes.
struct SweepConfig {
  bool enabled = true;
  std::vector<std::size_t> pool_sizes{1, 2, 4, 8};
  std::size_t budget = 500;
  std::size_t seeds = 5;
  std::size_t images = 40;
};

struct TheoryConfig {
  bool enabled = true;
  theory::Theorem1Config theorem1;
  std::size_t t2_probes = 20;
  std::size_t t2_trials = 1000;
  double t2_mu = 0.01;      // trained pool, images in [0,1]^d
  double t2_toy_mu = 0.5;
  std::size_t t2_toy_pool = 8;
  double t2_toy_spread = 0.02;
  double t2_inflation = 1.05;
  std::size_t t2_lipschitz_pairs = 2000;
  bool t2_trained_pool = true;
};

struct BenchConfig {
  std::vector<std::size_t> pool_sizes{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<std::string> methods{"patchwise", "ensemble"};
  std::size_t reps = 1000;
  std::size_t warmup = 100;
  std::size_t height = 32, width = 32;
  std::size_t grid_rows = 3, grid_cols = 3;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out = "results";
  std::size_t jobs = 1;
  DatasetConfig dataset;
  ClassifierConfig classifier;
  PoolConfig pool;
  AttackGridConfig attacks;
  SweepConfig sweep;
  TheoryConfig theory;
  BenchConfig bench;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

/// Parses the key-value document: "[section]" headers, "key = value" lines,
/// '#' or ';' comments. Lists are comma separated, optionally in brackets.
/// Unknown sections or keys are errors.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every setting that can change an output byte, one "section.key = value"
/// per line in a fixed order. out and jobs are excluded.
std::string canonical_config(const ExperimentConfig& cfg);

/// Per-component seed derived from the master seed.
std::uint64_t component_seed(const ExperimentConfig& cfg, std::string_view component);

/// Hex SHA-1 over git's blob framing, "blob <size>\0" followed by the bytes.
std::string git_blob_hash(std::string_view bytes);
std::string git_blob_hash_file(const std::filesystem::path& path);

}  // namespace rlp
