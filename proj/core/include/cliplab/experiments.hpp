#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cliplab/losses.hpp"
#include "cliplab/synthetic_data.hpp"
#include "cliplab/trainer.hpp"

namespace cliplab {

inline constexpr const char* kVersion = "0.1.0";

enum class ExperimentId {
  E1_temp_margin,
  E2_clip_vs_square,
  E3_regularization,
  E4_concentration,
  E5_shifted_prompts,
};

std::string to_string(ExperimentId id);
std::optional<ExperimentId> experiment_from_string(const std::string& name);

struct ExperimentInfo {
  ExperimentId id;
  std::string description;
};
std::vector<ExperimentInfo> list_experiments();

struct EvalConfig {
  int n_trials = 10000;
  std::vector<int> r_values = {1, 2, 3};
  int eval_batch_size = 16;
  int margin_batches = 200;
  int histogram_bins = 60;
  int alpha_pairs = 20000;
  std::vector<double> gamma_grid;  // empty = 41 points over [0, 1.2]
  int variance_samples = 2000;
  std::vector<double> thresholds = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5};

  bool operator==(const EvalConfig&) const = default;
};

/// Experiment-specific knobs; each experiment reads only its own.
struct ExperimentParams {
  std::vector<double> temperatures = {0.07, 0.01};     // E1
  double reg_lambda = 0.1;                             // E3, positive regularizer
  std::optional<double> negative_lambda;               // E3 ablation; default 0.1 / (B^2 - B)
  std::vector<int> pool_sizes = {64, 256, 1024};       // E4
  int repeats = 200;                                   // E4
  int population_batches = 100000;                     // E4
  double wstar_scale = 1.0;                            // E4 model: scale * W*
  std::vector<double> shift_factors = {1, 2, 4, 8, 16, 32, 64};  // E5
  bool record_wall_time = false;                       // wall_ms column of trajectories

  bool operator==(const ExperimentParams&) const = default;
};

struct ExperimentConfig {
  ExperimentId experiment = ExperimentId::E1_temp_margin;
  std::uint64_t seed = 0;
  std::string output_dir;
  ModelSpec model;
  TrainConfig train;
  EvalConfig eval;
  ExperimentParams params;
};

bool operator==(const TrainConfig& a, const TrainConfig& b);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

/// Defaults tuned for each experiment; config files override field by field.
ExperimentConfig default_config(ExperimentId id);

/// Full canonical form (every field present).
nlohmann::json to_json(const ExperimentConfig& config);

/// Parses and validates; throws ConfigError listing every problem, each
/// prefixed with its field path (or line and column for syntax errors).
/// A seed override replaces the file's seed and makes the field optional.
ExperimentConfig parse_config(const std::string& text,
                              std::optional<std::uint64_t> seed_override = std::nullopt);
ExperimentConfig load_config(const std::string& path,
                             std::optional<std::uint64_t> seed_override = std::nullopt);
void save_config(const std::string& path, const ExperimentConfig& config);

/// Semantic checks on an already-typed config; empty when valid.
std::vector<std::string> validate_config(const ExperimentConfig& config);

/// 16 hex digits of FNV-1a over the sorted-key dump; key order in the file
/// does not matter.
std::string config_hash(const ExperimentConfig& config);

struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string version;
  std::string started_at;
  std::string finished_at;
  std::vector<std::string> files;  // relative to the output directory
};

struct RunResult {
  RunManifest manifest;
  nlohmann::json summary;
  std::string output_dir;
};

/// Runs the experiment into config.output_dir, writing manifest.json and
/// summary.json last. On failure, files written so far are removed and the
/// error is rethrown.
RunResult run_experiment(const ExperimentConfig& config);

nlohmann::json to_json(const RunManifest& manifest);

}  // namespace cliplab
