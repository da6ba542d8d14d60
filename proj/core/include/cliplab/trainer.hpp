#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cliplab/losses.hpp"
#include "cliplab/score_models.hpp"
#include "cliplab/synthetic_data.hpp"

namespace cliplab {

enum class InitKind {
  zero,
  scaled_wstar,    // W0 = init_scale * W*
  seeded_random,   // iid N(0, init_scale^2) entries
  margin_trap,     // W0 = c (tau / gamma) W*, c = 2 log(16 |G|^2 |H|^2 (R^2+1)^2 B eta T / tau)
};

std::string to_string(InitKind kind);
InitKind init_kind_from_string(const std::string& name);

struct TrainConfig {
  double eta = 0.0;             // <= 0 selects default_learning_rate(gen, tau, lr_constant)
  double lr_constant = 0.1;
  int iterations = 1000;
  int batch_size = 16;
  double tau = 0.07;
  bool trainable_tau = false;
  double tau_min = 0.01;
  double tau_max = 1.0;
  double tau_eta = 0.0;         // step on log tau; <= 0 reuses eta
  double lambda = 0.0;
  RegularizerKind reg_kind = RegularizerKind::none;
  InitKind init = InitKind::zero;
  double init_scale = 1.0;
  int pool_batches = 256;
  bool fresh_sampling = false;  // new batch every step instead of the fixed pool
  SimilarityKind similarity = SimilarityKind::inner;
  double fd_step = 1e-6;        // used for similarities without an analytic gradient
  bool early_stop = true;
  int early_stop_window = 50;
  double early_stop_tol = 1e-9;
  double divergence_threshold = 1e6;

  /// Throws ConfigError listing every violated constraint.
  void validate() const;
};

struct TrajectoryRecord {
  int iteration = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double tau = 0.0;
  double min_diag_score = 0.0;
  double max_offdiag_score = 0.0;
  double wall_ms = 0.0;
};

struct TrainTrajectory {
  std::vector<TrajectoryRecord> records;
  bool early_stopped = false;
};

struct TrainResult {
  LinearScoreModel model;
  TrainTrajectory trajectory;
  double eta = 0.0;
};

struct Gradient {
  Matrix W;
  double tau = 0.0;  // dL/dtau
};

/// Gradient of the (optionally regularized) batch loss in W and tau. With
/// S = X W^T Y^T and M = (P_text + P_image - 2I) / (B tau), the contrastive
/// part is Y^T M^T X.
Gradient clip_gradient(const LinearScoreModel& model, const BatchData& batch, double lambda = 0.0,
                       RegularizerKind kind = RegularizerKind::none);

/// Same, from raw design matrices (rows are samples).
Gradient clip_gradient(const Matrix& W, double tau, const Matrix& X, const Matrix& Y,
                       double lambda = 0.0, RegularizerKind kind = RegularizerKind::none);

using MatrixObjective = std::function<double(const Matrix&)>;

/// Entrywise central differences with step h in [1e-8, 1e-3].
Matrix finite_diff_gradient(const MatrixObjective& objective, const Matrix& W, double h);

/// 0.1 tau^2 / (|G|^2 |H|^2 (1 + R)^4) with 0.1 replaced by `constant`.
double default_learning_rate(const GenerativeModel& gen, double tau, double constant = 0.1);

/// The scalar c (tau / gamma) multiplying W* in the margin-trap initialization.
double margin_trap_scale(const GenerativeModel& gen, double tau, int B, double eta, int T);

Matrix initial_weights(const GenerativeModel& gen, const TrainConfig& config, double eta,
                       std::uint64_t seed);

/// Batches for pool-mode training; the pool derives from `seed` alone.
std::vector<BatchData> sample_pool(const GenerativeModel& gen, int B, int n, std::uint64_t seed);

/// Mean batch loss over a pool, with the chosen regularizer.
double pool_loss(const LinearScoreModel& model, const std::vector<BatchData>& pool,
                 double lambda = 0.0, RegularizerKind kind = RegularizerKind::none);

TrainResult train_gd(const GenerativeModel& gen, const TrainConfig& config, std::uint64_t seed);

/// Training on a caller-supplied pool (fresh_sampling is ignored).
TrainResult train_gd_on_pool(const GenerativeModel& gen, const std::vector<BatchData>& pool,
                             const TrainConfig& config, std::uint64_t seed);

std::string trajectory_csv_header();
/// wall_ms is written as 0 when `include_wall_time` is false so that reruns
/// produce identical files.
void write_trajectory_csv(const std::string& path, const TrainTrajectory& trajectory,
                          bool include_wall_time = true);

}  // namespace cliplab
