#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "cliplab/errors.hpp"
#include "cliplab/evaluation.hpp"
#include "cliplab/trainer.hpp"
#include "oracles.hpp"

using namespace cliplab;

namespace {

GenerativeModel small_model(SamplerKind kind = SamplerKind::ball) {
  ModelSpec s;
  s.K = 4;
  s.K1 = 5;
  s.K2 = 2;
  s.K3 = 2;
  s.gamma = 0.5;
  s.d1 = 8;
  s.d2 = 8;
  s.xi_kind = kind;
  s.zeta_kind = kind;
  s.mixing = true;
  return build_model(s);
}

Matrix random_matrix(std::mt19937_64& rng, int r, int c, double scale) {
  std::normal_distribution<double> n01;
  Matrix W(r, c);
  for (int i = 0; i < W.size(); ++i) W.data()[i] = scale * n01(rng);
  return W;
}

double max_rel(const Matrix& a, const Matrix& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), 1e-300);
}

}  // namespace

TEST_CASE("analytic gradient matches central differences") {
  const auto gen = small_model();
  std::mt19937_64 rng(1);
  const RegularizerKind kinds[] = {RegularizerKind::none, RegularizerKind::positive,
                                   RegularizerKind::negative};
  for (int trial = 0; trial < 12; ++trial) {
    SampleStreams streams(trial);
    const auto batch = sample_batch(gen, 2 + trial % 7, streams);
    const double tau = 0.05 + 0.1 * (trial % 5);
    const auto kind = kinds[trial % 3];
    const double lambda = kind == RegularizerKind::negative ? 0.01 : 0.1;
    const LinearScoreModel model(random_matrix(rng, gen.d2(), gen.d1(), 0.3), tau);
    const auto g = clip_gradient(model, batch, lambda, kind);
    const auto objective = [&](const Matrix& W) {
      return regularized_loss(LinearScoreModel(W, tau), batch, lambda, kind).value;
    };
    const Matrix fd = oracle::central_differences(objective, model.W(), 1e-6);
    REQUIRE(max_rel(g.W, fd) < 1e-6);
    const double up = clip_batch_loss(LinearScoreModel(model.W(), tau + 1e-7), batch).value;
    const double down = clip_batch_loss(LinearScoreModel(model.W(), tau - 1e-7), batch).value;
    REQUIRE(g.tau == doctest::Approx((up - down) / 2e-7).epsilon(1e-5));
  }
}

TEST_CASE("library finite differences agree with the oracle and exact derivatives") {
  std::mt19937_64 rng(2);
  const Matrix A = random_matrix(rng, 3, 4, 1.0);
  const auto linear = [&](const Matrix& W) { return (A.array() * W.array()).sum(); };
  const Matrix W = random_matrix(rng, 3, 4, 1.0);
  CHECK((finite_diff_gradient(linear, W, 1e-5) - A).cwiseAbs().maxCoeff() < 1e-9);
  const auto quad = [](const Matrix& V) { return 0.5 * V.squaredNorm(); };
  CHECK((finite_diff_gradient(quad, W, 1e-4) - W).cwiseAbs().maxCoeff() < 1e-7);
  CHECK_THROWS_AS(finite_diff_gradient(quad, W, 1e-9), OutOfRangeError);
  CHECK_THROWS_AS(finite_diff_gradient(quad, W, 1e-2), OutOfRangeError);
}

TEST_CASE("gradient vanishes under perfect separation") {
  const auto gen = small_model(SamplerKind::zero);
  // Distinct latents only, so the off-diagonal scores sit gamma below the diagonal.
  SampleStreams streams(3);
  BatchData batch;
  for (int k = 0; k < gen.K(); ++k) batch.samples.push_back(sample_pair_with_latent(gen, k, streams));
  const LinearScoreModel model(1e3 * completeness_weights(gen), 0.01);
  const auto g = clip_gradient(model, batch);
  CHECK(g.W.norm() < 1e-100);
}

TEST_CASE("positive regularizer gradient is a constant shift") {
  const auto gen = small_model();
  SampleStreams streams(4);
  const auto batch = sample_batch(gen, 6, streams);
  std::mt19937_64 rng(4);
  const LinearScoreModel model(random_matrix(rng, gen.d2(), gen.d1(), 0.5), 0.1);
  const Matrix X = batch.images(), Y = batch.texts();
  const Matrix diff = clip_gradient(model, batch, 0.3, RegularizerKind::positive).W -
                      clip_gradient(model, batch).W;
  CHECK((diff + (0.3 / 6.0) * Y.transpose() * X).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("raw-matrix and batch gradients agree") {
  const auto gen = small_model();
  SampleStreams streams(5);
  const auto batch = sample_batch(gen, 5, streams);
  std::mt19937_64 rng(5);
  const LinearScoreModel model(random_matrix(rng, gen.d2(), gen.d1(), 0.5), 0.2);
  const auto a = clip_gradient(model, batch, 0.01, RegularizerKind::negative);
  const auto b = clip_gradient(model.W(), 0.2, batch.images(), batch.texts(), 0.01,
                               RegularizerKind::negative);
  CHECK((a.W - b.W).norm() < 1e-14);
  CHECK(a.tau == b.tau);
}

TEST_CASE("analytic gradient refuses non-inner similarities") {
  const auto gen = small_model();
  SampleStreams streams(6);
  const auto batch = sample_batch(gen, 3, streams);
  const LinearScoreModel model(Matrix::Identity(gen.d2(), gen.d1()), 0.1, SimilarityKind::cosine);
  CHECK_THROWS_AS(clip_gradient(model, batch), UnsupportedSimilarityError);
}

TEST_CASE("default learning rate and margin-trap scale follow their formulas") {
  const auto gen = small_model();
  const double G2 = gen.G_norm() * gen.G_norm(), H2 = gen.H_norm() * gen.H_norm();
  const double R = gen.radius();
  const double eta = default_learning_rate(gen, 0.07);
  CHECK(eta == doctest::Approx(0.1 * 0.07 * 0.07 / (G2 * H2 * std::pow(1 + R, 4))));
  CHECK(default_learning_rate(gen, 0.07, 0.5) == doctest::Approx(5.0 * eta));
  const double c = 2.0 * std::log(16.0 * G2 * H2 * std::pow(R * R + 1, 2) * 16 * eta * 100 / 0.07);
  CHECK(margin_trap_scale(gen, 0.07, 16, eta, 100) == doctest::Approx(c * 0.07 / 0.5));
}

TEST_CASE("initializations") {
  const auto gen = small_model();
  TrainConfig cfg;
  cfg.init = InitKind::zero;
  CHECK(initial_weights(gen, cfg, 0.1, 1).isZero());
  cfg.init = InitKind::scaled_wstar;
  cfg.init_scale = 2.0;
  CHECK((initial_weights(gen, cfg, 0.1, 1) - 2.0 * completeness_weights(gen)).norm() < 1e-12);
  cfg.init = InitKind::seeded_random;
  cfg.init_scale = 1e-3;
  const Matrix a = initial_weights(gen, cfg, 0.1, 7), b = initial_weights(gen, cfg, 0.1, 7);
  CHECK(a == b);
  CHECK(a != initial_weights(gen, cfg, 0.1, 8));
  CHECK(a.cwiseAbs().maxCoeff() < 1e-2);
  for (auto k : {InitKind::zero, InitKind::scaled_wstar, InitKind::seeded_random, InitKind::margin_trap})
    CHECK(init_kind_from_string(to_string(k)) == k);
}

TEST_CASE("training is bit-for-bit reproducible") {
  const auto gen = small_model();
  TrainConfig cfg;
  cfg.iterations = 60;
  cfg.pool_batches = 16;
  cfg.batch_size = 8;
  cfg.early_stop = false;
  const auto a = train_gd(gen, cfg, 42);
  const auto b = train_gd(gen, cfg, 42);
  CHECK(a.model.W() == b.model.W());
  REQUIRE(a.trajectory.records.size() == b.trajectory.records.size());
  for (std::size_t i = 0; i < a.trajectory.records.size(); ++i)
    CHECK(a.trajectory.records[i].loss == b.trajectory.records[i].loss);
  cfg.fresh_sampling = true;
  CHECK(train_gd(gen, cfg, 42).model.W() == train_gd(gen, cfg, 42).model.W());
}

TEST_CASE("full-batch descent on a fixed pool is monotone at the default step") {
  const auto gen = small_model();
  TrainConfig cfg;
  cfg.iterations = 300;
  cfg.pool_batches = 8;
  cfg.batch_size = 8;
  cfg.early_stop = false;
  const auto res = train_gd(gen, cfg, 3);
  const auto& r = res.trajectory.records;
  for (std::size_t i = 1; i < r.size(); ++i) REQUIRE(r[i].loss <= r[i - 1].loss + 1e-12);
  CHECK(r.back().loss < r.front().loss);
}

TEST_CASE("gradient norms respect the smoothness bound along a trajectory") {
  const auto gen = small_model();
  TrainConfig cfg;
  cfg.iterations = 200;
  cfg.pool_batches = 8;
  cfg.early_stop = false;
  const auto res = train_gd(gen, cfg, 4);
  const double R = gen.radius();
  const double bound = 2.0 / cfg.tau * gen.G_norm() * gen.H_norm() * (R * R + 1);
  for (const auto& rec : res.trajectory.records) REQUIRE(rec.grad_norm <= bound);
}

TEST_CASE("starting at the separating solution training stays put") {
  auto gen = small_model(SamplerKind::zero);
  TrainConfig cfg;
  cfg.init = InitKind::scaled_wstar;
  cfg.init_scale = 1.0;
  cfg.tau = 0.01;
  cfg.iterations = 100;
  cfg.pool_batches = 16;
  cfg.early_stop = false;
  const auto res = train_gd(gen, cfg, 5);
  const auto& r = res.trajectory.records;
  CHECK(std::abs(r.back().loss - r.front().loss) < 1e-6);
  CHECK((res.model.W() - completeness_weights(gen)).norm() < 1e-3);
  ZeroShotOptions opt;
  opt.n_trials = 2000;
  CHECK(zero_shot_error(Scorer(res.model), gen, 1, opt, 1).value == 0.0);
}

TEST_CASE("an oversized step raises DivergenceError") {
  const auto gen = small_model();
  TrainConfig cfg;
  cfg.eta = 1e12;
  cfg.tau = 0.01;
  cfg.iterations = 50;
  cfg.pool_batches = 4;
  cfg.early_stop = false;
  CHECK_THROWS_AS(train_gd(gen, cfg, 6), DivergenceError);
}

TEST_CASE("trainable temperature stays within its clamp") {
  const auto gen = small_model();
  TrainConfig cfg;
  cfg.trainable_tau = true;
  cfg.tau = 0.5;
  cfg.tau_min = 0.2;
  cfg.tau_max = 0.6;
  cfg.tau_eta = 0.5;
  cfg.iterations = 100;
  cfg.pool_batches = 4;
  cfg.early_stop = false;
  const auto res = train_gd(gen, cfg, 7);
  for (const auto& rec : res.trajectory.records) {
    REQUIRE(rec.tau >= 0.2);
    REQUIRE(rec.tau <= 0.6);
  }
  CHECK(res.model.tau() >= 0.2);
}

TEST_CASE("non-inner similarities train through finite differences") {
  const auto gen = small_model();
  TrainConfig cfg;
  cfg.similarity = SimilarityKind::cosine;
  cfg.init = InitKind::seeded_random;
  cfg.init_scale = 0.3;
  cfg.tau = 0.1;
  cfg.eta = 0.05;
  cfg.iterations = 15;
  cfg.pool_batches = 2;
  cfg.batch_size = 6;
  cfg.early_stop = false;
  const auto res = train_gd(gen, cfg, 8);
  CHECK(res.model.similarity_kind() == SimilarityKind::cosine);
  CHECK(res.trajectory.records.back().loss < res.trajectory.records.front().loss);
}

TEST_CASE("early stopping triggers on a flat pool loss") {
  auto gen = small_model(SamplerKind::zero);
  TrainConfig cfg;
  cfg.init = InitKind::scaled_wstar;
  cfg.init_scale = 5.0;
  cfg.tau = 0.01;
  cfg.iterations = 1000;
  cfg.pool_batches = 4;
  cfg.early_stop_window = 20;
  const auto res = train_gd(gen, cfg, 9);
  CHECK(res.trajectory.early_stopped);
  CHECK(res.trajectory.records.size() < 1000);
}

TEST_CASE("config validation lists every problem") {
  TrainConfig cfg;
  cfg.iterations = -1;
  cfg.batch_size = 0;
  cfg.tau = -1.0;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.problems().size() >= 3);
  }
  CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("trajectory CSV has a fixed header and zeroed wall time") {
  CHECK(trajectory_csv_header() == "iteration,loss,grad_norm,tau,wall_ms");
  TrainTrajectory traj;
  TrajectoryRecord rec;
  rec.iteration = 0;
  rec.loss = 1.5;
  rec.grad_norm = 0.25;
  rec.tau = 0.07;
  rec.wall_ms = 12.5;
  traj.records.push_back(rec);
  const auto path = (std::filesystem::temp_directory_path() / "cliplab_traj_test.csv").string();
  write_trajectory_csv(path, traj, false);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == trajectory_csv_header());
  CHECK(row.substr(0, 2) == "0,");
  CHECK(row.substr(row.size() - 2) == ",0");
  std::filesystem::remove(path);
}

TEST_CASE("pool loss averages batch losses") {
  const auto gen = small_model();
  const auto pool = sample_pool(gen, 5, 3, 10);
  REQUIRE(pool.size() == 3);
  const LinearScoreModel model(completeness_weights(gen), 0.2);
  double mean = 0.0;
  for (const auto& b : pool) mean += clip_batch_loss(model, b).value / 3.0;
  CHECK(pool_loss(model, pool) == doctest::Approx(mean));
  const auto again = sample_pool(gen, 5, 3, 10);
  CHECK(again[2].images() == pool[2].images());
}
