#include "cliplab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "cliplab/errors.hpp"

namespace cliplab {

namespace {

// Everything one pass over the pool produces.
struct PoolPass {
  double loss = 0.0;
  Matrix grad_W;
  double grad_tau = 0.0;
  double min_diag = std::numeric_limits<double>::infinity();
  double max_offdiag = -std::numeric_limits<double>::infinity();
};

struct StackedPool {
  Matrix X;  // (n B) x d1
  Matrix Y;  // (n B) x d2
  int n = 0;
  int B = 0;
  // The regularizers are linear in W, so their gradients are fixed matrices.
  Matrix positive_grad;  // d/dW of the mean over the pool of -(1/B) sum_i f_ii
  Matrix negative_grad;  // d/dW of the mean over the pool of sum_{i != j} f_ij
};

StackedPool stack_pool(const std::vector<BatchData>& pool) {
  if (pool.empty()) throw EmptyBatchError("training pool is empty");
  StackedPool sp;
  sp.n = static_cast<int>(pool.size());
  sp.B = pool.front().size();
  if (sp.B == 0) throw EmptyBatchError("training pool holds an empty batch");
  const int d1 = static_cast<int>(pool.front().samples.front().x.size());
  const int d2 = static_cast<int>(pool.front().samples.front().y.size());
  sp.X.resize(static_cast<Eigen::Index>(sp.n) * sp.B, d1);
  sp.Y.resize(static_cast<Eigen::Index>(sp.n) * sp.B, d2);
  sp.negative_grad = Matrix::Zero(d2, d1);
  for (int k = 0; k < sp.n; ++k) {
    if (pool[static_cast<std::size_t>(k)].size() != sp.B) {
      throw DimensionError("pool batches must share one batch size");
    }
    const Matrix Xk = pool[static_cast<std::size_t>(k)].images();
    const Matrix Yk = pool[static_cast<std::size_t>(k)].texts();
    sp.X.middleRows(static_cast<Eigen::Index>(k) * sp.B, sp.B) = Xk;
    sp.Y.middleRows(static_cast<Eigen::Index>(k) * sp.B, sp.B) = Yk;
    sp.negative_grad += Yk.colwise().sum().transpose() * Xk.colwise().sum() - Yk.transpose() * Xk;
  }
  sp.negative_grad /= sp.n;
  sp.positive_grad = -(sp.Y.transpose() * sp.X) / (static_cast<double>(sp.n) * sp.B);
  return sp;
}

void track_extremes(const Matrix& S, PoolPass& pass) {
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    for (Eigen::Index j = 0; j < S.cols(); ++j) {
      if (i == j) {
        pass.min_diag = std::min(pass.min_diag, S(i, j));
      } else {
        pass.max_offdiag = std::max(pass.max_offdiag, S(i, j));
      }
    }
  }
}

double regularizer_value(const Matrix& S, double lambda, RegularizerKind kind) {
  switch (kind) {
    case RegularizerKind::none:
      return 0.0;
    case RegularizerKind::positive:
      return -lambda * S.trace() / static_cast<double>(S.rows());
    case RegularizerKind::negative:
      return lambda * (S.sum() - S.trace());
  }
  return 0.0;
}

// Loss (and, for inner similarity, the analytic gradient) of the pool objective.
PoolPass evaluate_pool(const StackedPool& sp, const Matrix& W, double tau, SimilarityKind kind,
                       double lambda, RegularizerKind reg, bool want_grad) {
  PoolPass pass;
  const bool analytic = want_grad && kind == SimilarityKind::inner;
  Matrix Q;
  if (analytic) Q.resize(sp.X.rows(), sp.X.cols());
  const LinearScoreModel model(W, tau, kind);
  const Matrix GX = sp.X * W.transpose();
  for (int k = 0; k < sp.n; ++k) {
    const auto rows = static_cast<Eigen::Index>(k) * sp.B;
    Matrix S;
    if (kind == SimilarityKind::inner) {
      S = GX.middleRows(rows, sp.B) * sp.Y.middleRows(rows, sp.B).transpose();
    } else {
      S = model.score_matrix(sp.X.middleRows(rows, sp.B), sp.Y.middleRows(rows, sp.B));
    }
    track_extremes(S, pass);
    if (analytic) {
      const ContrastiveSoftmax cs = contrastive_softmax(S, tau);
      Matrix M = cs.text_softmax + cs.image_softmax;
      M.diagonal().array() -= 2.0;
      pass.grad_tau += -(M.cwiseProduct(S)).sum() / (static_cast<double>(sp.B) * tau * tau);
      M /= static_cast<double>(sp.B) * tau;
      Q.middleRows(rows, sp.B) = M.transpose() * sp.X.middleRows(rows, sp.B);
      pass.loss += cs.loss;
    } else {
      pass.loss += clip_loss_from_scores(S, tau).value;
    }
    pass.loss += regularizer_value(S, lambda, reg);
  }
  pass.loss /= sp.n;
  if (analytic) {
    pass.grad_W = sp.Y.transpose() * Q / static_cast<double>(sp.n);
    pass.grad_tau /= sp.n;
    if (reg == RegularizerKind::positive) pass.grad_W += lambda * sp.positive_grad;
    if (reg == RegularizerKind::negative) pass.grad_W += lambda * sp.negative_grad;
  }
  return pass;
}

}  // namespace

std::string to_string(InitKind kind) {
  switch (kind) {
    case InitKind::zero:
      return "zero";
    case InitKind::scaled_wstar:
      return "scaled_wstar";
    case InitKind::seeded_random:
      return "seeded_random";
    case InitKind::margin_trap:
      return "margin_trap";
  }
  return "unknown";
}

InitKind init_kind_from_string(const std::string& name) {
  if (name == "zero") return InitKind::zero;
  if (name == "scaled_wstar") return InitKind::scaled_wstar;
  if (name == "seeded_random") return InitKind::seeded_random;
  if (name == "margin_trap") return InitKind::margin_trap;
  throw OutOfRangeError("unknown init kind '" + name + "'");
}

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (!(lr_constant > 0.0)) problems.emplace_back("lr_constant must be positive");
  if (iterations < 0) problems.emplace_back("iterations must be nonnegative");
  if (batch_size < 1) problems.emplace_back("batch_size must be at least 1");
  if (!(tau > 0.0)) problems.emplace_back("tau must be positive");
  if (trainable_tau) {
    if (!(tau_min > 0.0) || !(tau_min <= tau_max)) {
      problems.emplace_back("tau range must satisfy 0 < tau_min <= tau_max");
    } else if (tau < tau_min || tau > tau_max) {
      problems.emplace_back("tau must lie inside [tau_min, tau_max]");
    }
  }
  if (!(lambda >= 0.0)) problems.emplace_back("lambda must be nonnegative");
  if (reg_kind == RegularizerKind::negative && batch_size < 2) {
    problems.emplace_back("negative-pair regularizer needs batch_size >= 2");
  }
  if (pool_batches < 1) problems.emplace_back("pool_batches must be at least 1");
  if (!(fd_step >= 1e-8 && fd_step <= 1e-3)) problems.emplace_back("fd_step must lie in [1e-8, 1e-3]");
  if (early_stop_window < 1) problems.emplace_back("early_stop_window must be at least 1");
  if (!(init_scale >= 0.0)) problems.emplace_back("init_scale must be nonnegative");
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

Gradient clip_gradient(const Matrix& W, double tau, const Matrix& X, const Matrix& Y, double lambda,
                       RegularizerKind kind) {
  if (X.rows() != Y.rows()) throw DimensionError("image and text counts differ");
  if (X.rows() == 0) throw EmptyBatchError("gradient of an empty batch");
  if (X.cols() != W.cols() || Y.cols() != W.rows()) throw DimensionError("batch does not match W");
  const double B = static_cast<double>(X.rows());
  const Matrix S = X * W.transpose() * Y.transpose();
  const ContrastiveSoftmax cs = contrastive_softmax(S, tau);
  Matrix M = cs.text_softmax + cs.image_softmax;
  M.diagonal().array() -= 2.0;
  Gradient g;
  g.tau = -(M.cwiseProduct(S)).sum() / (B * tau * tau);
  g.W = Y.transpose() * M.transpose() * X / (B * tau);
  switch (kind) {
    case RegularizerKind::none:
      break;
    case RegularizerKind::positive:
      g.W -= lambda / B * Y.transpose() * X;
      break;
    case RegularizerKind::negative:
      if (X.rows() < 2) throw DegenerateInputError("negative-pair regularizer needs B >= 2");
      g.W += lambda * (Y.colwise().sum().transpose() * X.colwise().sum() - Y.transpose() * X);
      break;
  }
  return g;
}

Gradient clip_gradient(const LinearScoreModel& model, const BatchData& batch, double lambda,
                       RegularizerKind kind) {
  if (model.similarity_kind() != SimilarityKind::inner) {
    throw UnsupportedSimilarityError("analytic gradient is only available for inner similarity; " +
                                     to_string(model.similarity_kind()) +
                                     " trains via finite differences");
  }
  if (batch.empty()) throw EmptyBatchError("gradient of an empty batch");
  return clip_gradient(model.W(), model.tau(), batch.images(), batch.texts(), lambda, kind);
}

Matrix finite_diff_gradient(const MatrixObjective& objective, const Matrix& W, double h) {
  if (!(h >= 1e-8 && h <= 1e-3)) throw OutOfRangeError("finite-difference step must lie in [1e-8, 1e-3]");
  Matrix grad(W.rows(), W.cols());
  Matrix probe = W;
  for (Eigen::Index j = 0; j < W.cols(); ++j) {
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
      const double w = W(i, j);
      probe(i, j) = w + h;
      const double up = objective(probe);
      probe(i, j) = w - h;
      const double down = objective(probe);
      probe(i, j) = w;
      grad(i, j) = (up - down) / (2.0 * h);
    }
  }
  return grad;
}

double default_learning_rate(const GenerativeModel& gen, double tau, double constant) {
  const double g2 = gen.G_norm() * gen.G_norm();
  const double h2 = gen.H_norm() * gen.H_norm();
  return constant * tau * tau / (g2 * h2 * std::pow(1.0 + gen.radius(), 4));
}

double margin_trap_scale(const GenerativeModel& gen, double tau, int B, double eta, int T) {
  const double g2 = gen.G_norm() * gen.G_norm();
  const double h2 = gen.H_norm() * gen.H_norm();
  const double r2 = gen.radius() * gen.radius();
  const double arg = 16.0 * g2 * h2 * (r2 + 1.0) * (r2 + 1.0) * B / tau * eta * T;
  if (!(arg > 1.0)) throw OutOfRangeError("margin-trap initialization needs a log argument above 1");
  const double c = 2.0 * std::log(arg);
  return c * tau / gen.latent().margin_gamma;
}

Matrix initial_weights(const GenerativeModel& gen, const TrainConfig& config, double eta,
                       std::uint64_t seed) {
  switch (config.init) {
    case InitKind::zero:
      return Matrix::Zero(gen.d2(), gen.d1());
    case InitKind::scaled_wstar:
      return config.init_scale * completeness_weights(gen);
    case InitKind::seeded_random: {
      Rng rng = make_rng(seed, "init");
      std::normal_distribution<double> normal(0.0, 1.0);
      Matrix W(gen.d2(), gen.d1());
      for (Eigen::Index j = 0; j < W.cols(); ++j)
        for (Eigen::Index i = 0; i < W.rows(); ++i) W(i, j) = config.init_scale * normal(rng);
      return W;
    }
    case InitKind::margin_trap:
      return margin_trap_scale(gen, config.tau, config.batch_size, eta, config.iterations) *
             completeness_weights(gen);
  }
  return {};
}

std::vector<BatchData> sample_pool(const GenerativeModel& gen, int B, int n, std::uint64_t seed) {
  SampleStreams streams(derive_seed(seed, "pool"));
  std::vector<BatchData> pool;
  pool.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) pool.push_back(sample_batch(gen, B, streams));
  return pool;
}

double pool_loss(const LinearScoreModel& model, const std::vector<BatchData>& pool, double lambda,
                 RegularizerKind kind) {
  const StackedPool sp = stack_pool(pool);
  return evaluate_pool(sp, model.W(), model.tau(), model.similarity_kind(), lambda, kind, false).loss;
}

namespace {

TrainResult run_training(const GenerativeModel& gen, const std::vector<BatchData>* fixed_pool,
                         const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  using clock = std::chrono::steady_clock;
  const double eta = config.eta > 0.0 ? config.eta
                                      : default_learning_rate(gen, config.tau, config.lr_constant);
  const double tau_eta = config.tau_eta > 0.0 ? config.tau_eta : eta;

  Matrix W = initial_weights(gen, config, eta, seed);
  double tau = config.tau;
  TrainTrajectory traj;
  traj.records.reserve(static_cast<std::size_t>(config.iterations));

  SampleStreams fresh(derive_seed(seed, "fresh"));
  StackedPool sp;
  if (fixed_pool) sp = stack_pool(*fixed_pool);

  const auto start = clock::now();
  for (int t = 0; t < config.iterations; ++t) {
    if (!fixed_pool) sp = stack_pool({sample_batch(gen, config.batch_size, fresh)});

    PoolPass pass;
    try {
      pass = evaluate_pool(sp, W, tau, config.similarity, config.lambda, config.reg_kind, true);
      if (config.similarity != SimilarityKind::inner) {
        const auto objective = [&](const Matrix& probe) {
          return evaluate_pool(sp, probe, tau, config.similarity, config.lambda, config.reg_kind, false)
              .loss;
        };
        pass.grad_W = finite_diff_gradient(objective, W, config.fd_step);
        if (config.trainable_tau) {
          const double h = config.fd_step * tau;
          const auto at = [&](double s) {
            return evaluate_pool(sp, W, s, config.similarity, config.lambda, config.reg_kind, false).loss;
          };
          pass.grad_tau = (at(tau + h) - at(tau - h)) / (2.0 * h);
        }
      }
    } catch (const NonFiniteError& e) {
      throw DivergenceError(std::string("training diverged: ") + e.what());
    }
    if (!std::isfinite(pass.loss) || pass.loss > config.divergence_threshold ||
        !pass.grad_W.allFinite()) {
      throw DivergenceError("training diverged at iteration " + std::to_string(t) +
                            " (loss " + std::to_string(pass.loss) + ")");
    }

    TrajectoryRecord rec;
    rec.iteration = t;
    rec.loss = pass.loss;
    rec.grad_norm = pass.grad_W.norm();
    rec.tau = tau;
    rec.min_diag_score = pass.min_diag;
    rec.max_offdiag_score = pass.max_offdiag;
    rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - start).count();
    traj.records.push_back(rec);

    W -= eta * pass.grad_W;
    if (config.trainable_tau) {
      tau = std::exp(std::log(tau) - tau_eta * tau * pass.grad_tau);
      tau = std::clamp(tau, config.tau_min, config.tau_max);
    }

    if (config.early_stop && fixed_pool && t >= config.early_stop_window) {
      const double before = traj.records[static_cast<std::size_t>(t - config.early_stop_window)].loss;
      if (before - pass.loss < config.early_stop_tol) {
        traj.early_stopped = true;
        break;
      }
    }
  }
  return TrainResult{LinearScoreModel(std::move(W), tau, config.similarity), std::move(traj), eta};
}

}  // namespace

TrainResult train_gd_on_pool(const GenerativeModel& gen, const std::vector<BatchData>& pool,
                             const TrainConfig& config, std::uint64_t seed) {
  return run_training(gen, &pool, config, seed);
}

TrainResult train_gd(const GenerativeModel& gen, const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  if (config.fresh_sampling) return run_training(gen, nullptr, config, seed);
  const auto pool = sample_pool(gen, config.batch_size, config.pool_batches, seed);
  return run_training(gen, &pool, config, seed);
}

std::string trajectory_csv_header() { return "iteration,loss,grad_norm,tau,wall_ms"; }

void write_trajectory_csv(const std::string& path, const TrainTrajectory& trajectory,
                          bool include_wall_time) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << trajectory_csv_header() << '\n' << std::setprecision(17);
  for (const auto& r : trajectory.records) {
    out << r.iteration << ',' << r.loss << ',' << r.grad_norm << ',' << r.tau << ','
        << (include_wall_time ? r.wall_ms : 0.0) << '\n';
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace cliplab
