#include "cliplab/synthetic_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "cliplab/errors.hpp"

namespace cliplab {

namespace {

constexpr double kRankTolerance = 1e-10;

void check_distribution(const std::vector<double>& probs, std::size_t expected, const char* what) {
  if (probs.size() != expected) {
    throw InvalidDistributionError(std::string(what) + ": expected " + std::to_string(expected) +
                                   " probabilities, got " + std::to_string(probs.size()));
  }
  double total = 0.0;
  for (double p : probs) {
    if (!(p > 0.0) || !std::isfinite(p)) {
      throw InvalidDistributionError(std::string(what) + ": probabilities must be positive");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw InvalidDistributionError(std::string(what) + ": probabilities sum to " +
                                   std::to_string(total));
  }
}

double smallest_singular_value(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& s = svd.singularValues();
  return s.size() == 0 ? 0.0 : s(s.size() - 1);
}

double spectral_norm(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& s = svd.singularValues();
  return s.size() == 0 ? 0.0 : s(0);
}

int draw_index(const std::vector<double>& probs, Rng& rng) {
  std::discrete_distribution<int> dist(probs.begin(), probs.end());
  return dist(rng);
}

// [I; 0] of shape rows x cols.
Matrix identity_block(int rows, int cols) {
  Matrix m = Matrix::Zero(rows, cols);
  m.topLeftCorner(cols, cols).setIdentity();
  return m;
}

// Orthogonal factor times singular values in [0.5, 1.5]: condition number <= 3.
Matrix mixing_matrix(int n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.5, 1.5);
  Matrix a(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) a(i, j) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  Vector s(n);
  for (int i = 0; i < n; ++i) s(i) = scale(rng);
  return q * s.asDiagonal();
}

}  // namespace

double LatentDictionary::max_cross_inner_product() const {
  const Matrix gram = vectors.transpose() * vectors;
  double best = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < gram.cols(); ++j)
    for (int i = 0; i < gram.rows(); ++i)
      if (i != j) best = std::max(best, gram(i, j));
  return best;
}

double LatentDictionary::collision_probability() const {
  return std::inner_product(probs.begin(), probs.end(), probs.begin(), 0.0);
}

LatentDictionary build_latent_dictionary(int K, int K1, double gamma,
                                         std::optional<std::vector<double>> probs,
                                         std::uint64_t seed) {
  if (K < 2) throw DimensionError("latent dictionary needs K >= 2, got " + std::to_string(K));
  if (K1 < K + 1) {
    throw DimensionError("latent dimension K1=" + std::to_string(K1) + " is too small for K=" +
                         std::to_string(K) + " (need K1 >= K + 1)");
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw InvalidMarginError("margin gamma must lie in (0, 1], got " + std::to_string(gamma));
  }

  LatentDictionary dict;
  dict.margin_gamma = gamma;
  if (probs) {
    check_distribution(*probs, static_cast<std::size_t>(K), "latent probabilities");
    dict.probs = *probs;
  } else {
    dict.probs.assign(static_cast<std::size_t>(K), 1.0 / K);
  }

  Vector u = Vector::Zero(K1);
  if (K1 == K + 1) {
    u(K) = 1.0;
  } else {
    Rng rng = make_rng(seed, "latent-dictionary");
    std::normal_distribution<double> normal(0.0, 1.0);
    do {
      for (int i = K; i < K1; ++i) u(i) = normal(rng);
    } while (u.norm() < 1e-3);
    u /= u.norm();
  }

  const double shared = std::sqrt(1.0 - gamma);
  const double own = std::sqrt(gamma);
  dict.vectors = Matrix::Zero(K1, K);
  for (int k = 0; k < K; ++k) {
    dict.vectors.col(k) = shared * u;
    dict.vectors(k, k) += own;
  }
  return dict;
}

std::string to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::zero:
      return "zero";
    case SamplerKind::ball:
      return "ball";
    case SamplerKind::discrete:
      return "discrete";
  }
  return "unknown";
}

SamplerKind sampler_kind_from_string(const std::string& name) {
  if (name == "zero") return SamplerKind::zero;
  if (name == "ball") return SamplerKind::ball;
  if (name == "discrete") return SamplerKind::discrete;
  throw InvalidDistributionError("unknown sampler kind '" + name + "'");
}

UniqueFeatureSampler UniqueFeatureSampler::zero(int dimension) {
  if (dimension < 1) throw DimensionError("unique-feature dimension must be positive");
  return UniqueFeatureSampler(SamplerKind::zero, dimension, 0.0);
}

UniqueFeatureSampler UniqueFeatureSampler::ball(int dimension, double radius) {
  if (dimension < 1) throw DimensionError("unique-feature dimension must be positive");
  if (!(radius >= 0.0) || !std::isfinite(radius)) {
    throw InvalidDistributionError("ball radius must be finite and nonnegative");
  }
  return UniqueFeatureSampler(SamplerKind::ball, dimension, radius);
}

UniqueFeatureSampler UniqueFeatureSampler::discrete(std::vector<Vector> support,
                                                    std::vector<double> probs) {
  if (support.empty()) throw InvalidDistributionError("discrete sampler needs a support");
  check_distribution(probs, support.size(), "support probabilities");
  const auto dim = support.front().size();
  if (dim < 1) throw DimensionError("unique-feature dimension must be positive");
  double radius = 0.0;
  for (const auto& v : support) {
    if (v.size() != dim) throw DimensionError("support vectors have mismatched dimensions");
    radius = std::max(radius, v.norm());
  }
  UniqueFeatureSampler s(SamplerKind::discrete, static_cast<int>(dim), radius);
  s.support_ = std::move(support);
  s.support_probs_ = std::move(probs);
  return s;
}

Vector UniqueFeatureSampler::sample(Rng& rng) const {
  switch (kind_) {
    case SamplerKind::zero:
      return Vector::Zero(dimension_);
    case SamplerKind::ball: {
      std::normal_distribution<double> normal(0.0, 1.0);
      std::uniform_real_distribution<double> uniform(0.0, 1.0);
      Vector dir(dimension_);
      double norm = 0.0;
      do {
        for (int i = 0; i < dimension_; ++i) dir(i) = normal(rng);
        norm = dir.norm();
      } while (norm == 0.0);
      const double r = radius_ * std::pow(uniform(rng), 1.0 / dimension_);
      Vector out = dir * (r / norm);
      // Rounding can push the norm a hair past the radius.
      const double n = out.norm();
      if (n > radius_) out *= radius_ / n;
      return out;
    }
    case SamplerKind::discrete:
      return support_[static_cast<std::size_t>(draw_index(support_probs_, rng))];
  }
  return Vector::Zero(dimension_);
}

Vector UniqueFeatureSampler::mean() const {
  if (kind_ != SamplerKind::discrete) return Vector::Zero(dimension_);
  Vector m = Vector::Zero(dimension_);
  for (std::size_t i = 0; i < support_.size(); ++i) m += support_probs_[i] * support_[i];
  return m;
}

Vector UniqueFeatureSampler::conditional_mean(int /*latent_index*/) const { return mean(); }

UniqueFeatureSampler UniqueFeatureSampler::scaled(double factor) const {
  if (!(factor >= 0.0) || !std::isfinite(factor)) {
    throw InvalidDistributionError("sampler scale factor must be finite and nonnegative");
  }
  switch (kind_) {
    case SamplerKind::zero:
      return *this;
    case SamplerKind::ball:
      return ball(dimension_, radius_ * factor);
    case SamplerKind::discrete: {
      std::vector<Vector> support = support_;
      for (auto& v : support) v *= factor;
      return discrete(std::move(support), support_probs_);
    }
  }
  return *this;
}

GenerativeModel::GenerativeModel(LatentDictionary latent, Matrix G, Matrix H,
                                 UniqueFeatureSampler xi_sampler,
                                 UniqueFeatureSampler zeta_sampler)
    : latent_(std::move(latent)),
      G_(std::move(G)),
      H_(std::move(H)),
      xi_sampler_(std::move(xi_sampler)),
      zeta_sampler_(std::move(zeta_sampler)) {
  const int k1 = latent_.dimension();
  if (G_.cols() != k1 + xi_sampler_.dimension()) {
    throw DimensionError("G must have K1 + K2 = " + std::to_string(k1 + xi_sampler_.dimension()) +
                         " columns, has " + std::to_string(G_.cols()));
  }
  if (H_.cols() != k1 + zeta_sampler_.dimension()) {
    throw DimensionError("H must have K1 + K3 = " +
                         std::to_string(k1 + zeta_sampler_.dimension()) + " columns, has " +
                         std::to_string(H_.cols()));
  }
  if (G_.rows() < G_.cols() || smallest_singular_value(G_) <= kRankTolerance) {
    throw RankDeficiencyError("image dictionary G is not full column rank");
  }
  if (H_.rows() < H_.cols() || smallest_singular_value(H_) <= kRankTolerance) {
    throw RankDeficiencyError("text dictionary H is not full column rank");
  }
  G_norm_ = spectral_norm(G_);
  H_norm_ = spectral_norm(H_);
}

double GenerativeModel::radius() const noexcept {
  return std::max(xi_sampler_.radius(), zeta_sampler_.radius());
}

Vector GenerativeModel::image(int latent_index, const Vector& xi) const {
  const int k1 = K1();
  return G_.leftCols(k1) * latent_.vectors.col(latent_index) + G_.rightCols(K2()) * xi;
}

Vector GenerativeModel::text(int latent_index, const Vector& zeta) const {
  const int k1 = K1();
  return H_.leftCols(k1) * latent_.vectors.col(latent_index) + H_.rightCols(K3()) * zeta;
}

GenerativeModel GenerativeModel::with_zeta_sampler(UniqueFeatureSampler zeta_sampler) const {
  return GenerativeModel(latent_, G_, H_, xi_sampler_, std::move(zeta_sampler));
}

Matrix BatchData::images() const {
  if (samples.empty()) return Matrix();
  Matrix m(size(), samples.front().x.size());
  for (int i = 0; i < size(); ++i) m.row(i) = samples[static_cast<std::size_t>(i)].x.transpose();
  return m;
}

Matrix BatchData::texts() const {
  if (samples.empty()) return Matrix();
  Matrix m(size(), samples.front().y.size());
  for (int i = 0; i < size(); ++i) m.row(i) = samples[static_cast<std::size_t>(i)].y.transpose();
  return m;
}

std::vector<int> BatchData::latents() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.latent_index);
  return out;
}

int sample_latent(const LatentDictionary& latent, Rng& rng) { return draw_index(latent.probs, rng); }

Vector sample_image(const GenerativeModel& model, int latent_index, SampleStreams& streams) {
  return model.image(latent_index, model.xi_sampler().sample(streams.xi()));
}

Vector sample_text(const GenerativeModel& model, int latent_index, SampleStreams& streams) {
  return model.text(latent_index, model.zeta_sampler().sample(streams.zeta()));
}

PairedSample sample_pair_with_latent(const GenerativeModel& model, int latent_index,
                                     SampleStreams& streams) {
  PairedSample s;
  s.latent_index = latent_index;
  s.xi = model.xi_sampler().sample(streams.xi());
  s.zeta = model.zeta_sampler().sample(streams.zeta());
  s.x = model.image(latent_index, s.xi);
  s.y = model.text(latent_index, s.zeta);
  return s;
}

PairedSample sample_pair(const GenerativeModel& model, SampleStreams& streams) {
  const int k = sample_latent(model.latent(), streams.latent());
  return sample_pair_with_latent(model, k, streams);
}

BatchData sample_batch(const GenerativeModel& model, int B, SampleStreams& streams) {
  if (B < 1) throw EmptyBatchError("batch size must be at least 1");
  BatchData batch;
  batch.samples.reserve(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) batch.samples.push_back(sample_pair(model, streams));
  return batch;
}

GenerativeModel make_case_study_model(const ModelSpec& spec) {
  LatentDictionary latent = build_latent_dictionary(
      spec.K, spec.K1, spec.gamma,
      spec.probs.empty() ? std::nullopt : std::optional<std::vector<double>>(spec.probs), spec.seed);

  auto make_sampler = [&](SamplerKind kind, int dim) {
    switch (kind) {
      case SamplerKind::zero:
        return UniqueFeatureSampler::zero(dim);
      case SamplerKind::ball:
        return UniqueFeatureSampler::ball(dim, spec.radius);
      case SamplerKind::discrete: {
        // +-radius e_1, equally likely.
        Vector e = Vector::Zero(dim);
        e(0) = spec.radius;
        return UniqueFeatureSampler::discrete({e, Vector(-e)}, {0.5, 0.5});
      }
    }
    return UniqueFeatureSampler::zero(dim);
  };

  const int g_cols = spec.K1 + spec.K2;
  const int h_cols = spec.K1 + spec.K3;
  if (spec.d1 < g_cols) {
    throw DimensionError("d1=" + std::to_string(spec.d1) + " is smaller than K1 + K2 = " +
                         std::to_string(g_cols));
  }
  if (spec.d2 < h_cols) {
    throw DimensionError("d2=" + std::to_string(spec.d2) + " is smaller than K1 + K3 = " +
                         std::to_string(h_cols));
  }
  Matrix G = identity_block(spec.d1, g_cols);
  Matrix H = identity_block(spec.d2, h_cols);
  if (spec.mixing) {
    Rng rng = make_rng(spec.seed, "mixing");
    G = mixing_matrix(spec.d1, rng) * G;
    H = mixing_matrix(spec.d2, rng) * H;
  }
  return GenerativeModel(std::move(latent), std::move(G), std::move(H),
                         make_sampler(spec.xi_kind, spec.K2),
                         make_sampler(spec.zeta_kind, spec.K3));
}

GenerativeModel counterexample_model(const ModelSpec& spec) {
  if (!(spec.gamma > 0.0 && spec.gamma < 1.0 / 3.0)) {
    throw InvalidMarginError("the square-loss counterexample needs 0 < gamma < 1/3, got " +
                             std::to_string(spec.gamma));
  }
  if (spec.K3 < 2) throw DimensionError("the square-loss counterexample needs K3 >= 2");
  LatentDictionary latent = build_latent_dictionary(
      spec.K, spec.K1, spec.gamma,
      spec.probs.empty() ? std::nullopt : std::optional<std::vector<double>>(spec.probs), spec.seed);

  const int k2 = std::max(spec.K2, 1);
  const int g_cols = spec.K1 + k2;
  const int h_cols = spec.K1 + spec.K3;
  const int d1 = std::max(spec.d1, g_cols);
  const int d2 = std::max(spec.d2, h_cols);

  Vector e1 = Vector::Zero(spec.K3);
  Vector e2 = Vector::Zero(spec.K3);
  e1(0) = 1.0;
  e2(1) = 1.0;
  return GenerativeModel(std::move(latent), identity_block(d1, g_cols), identity_block(d2, h_cols),
                         UniqueFeatureSampler::zero(k2),
                         UniqueFeatureSampler::discrete({e1, e2}, {1.0 / 3.0, 2.0 / 3.0}));
}

GenerativeModel counterexample_model(int K, double gamma, std::uint64_t seed) {
  ModelSpec spec;
  spec.family = ModelSpec::Family::counterexample;
  spec.K = K;
  spec.K1 = K + 1;
  spec.K2 = 1;
  spec.K3 = 2;
  spec.gamma = gamma;
  spec.d1 = spec.K1 + spec.K2;
  spec.d2 = spec.K1 + spec.K3 + 1;
  spec.seed = seed;
  return counterexample_model(spec);
}

GenerativeModel build_model(const ModelSpec& spec) {
  return spec.family == ModelSpec::Family::counterexample ? counterexample_model(spec)
                                                       : make_case_study_model(spec);
}

std::string samples_csv_header(int d1, int d2) {
  std::string h = "sample_id,latent_index";
  for (int i = 0; i < d1; ++i) h += ",x_" + std::to_string(i);
  for (int i = 0; i < d2; ++i) h += ",y_" + std::to_string(i);
  return h;
}

void write_samples_csv(const std::string& path, const BatchData& batch) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const int d1 = batch.empty() ? 0 : static_cast<int>(batch.samples.front().x.size());
  const int d2 = batch.empty() ? 0 : static_cast<int>(batch.samples.front().y.size());
  out << samples_csv_header(d1, d2) << '\n';
  out << std::setprecision(17);
  for (int i = 0; i < batch.size(); ++i) {
    const auto& s = batch.samples[static_cast<std::size_t>(i)];
    out << i << ',' << (s.latent_index + 1);
    for (int j = 0; j < s.x.size(); ++j) out << ',' << s.x(j);
    for (int j = 0; j < s.y.size(); ++j) out << ',' << s.y(j);
    out << '\n';
  }
}

}  // namespace cliplab
