#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cliplab/rng.hpp"

namespace cliplab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// K unit-norm latent vectors with every cross inner product equal to 1 - gamma.
///
/// Column k of `vectors` is v_k. Class indices are 0-based throughout the API.
struct LatentDictionary {
  Matrix vectors;
  std::vector<double> probs;
  double margin_gamma = 1.0;

  int count() const noexcept { return static_cast<int>(vectors.cols()); }
  int dimension() const noexcept { return static_cast<int>(vectors.rows()); }
  Vector vector(int k) const { return vectors.col(k); }

  double max_cross_inner_product() const;
  /// Probability that two independent latents coincide, sum_k p_k^2.
  double collision_probability() const;
};

/// Builds v_k = sqrt(1 - gamma) u + sqrt(gamma) e_k with u a unit vector
/// supported on coordinates K..K1-1. When K1 > K + 1 the seed picks u inside
/// that block; otherwise u = e_K. Uniform probabilities when `probs` is empty.
LatentDictionary build_latent_dictionary(int K, int K1, double gamma,
                                         std::optional<std::vector<double>> probs = std::nullopt,
                                         std::uint64_t seed = 0);

enum class SamplerKind { zero, ball, discrete };

std::string to_string(SamplerKind kind);
SamplerKind sampler_kind_from_string(const std::string& name);

/// Modality-specific feature distribution (xi on the image side, zeta on the
/// text side). Independent of the latent in every kind provided here.
class UniqueFeatureSampler {
 public:
  static UniqueFeatureSampler zero(int dimension);
  /// Uniform over the closed Euclidean ball of the given radius.
  static UniqueFeatureSampler ball(int dimension, double radius);
  static UniqueFeatureSampler discrete(std::vector<Vector> support, std::vector<double> probs);

  SamplerKind kind() const noexcept { return kind_; }
  int dimension() const noexcept { return dimension_; }
  double radius() const noexcept { return radius_; }
  const std::vector<Vector>& support() const noexcept { return support_; }
  const std::vector<double>& support_probs() const noexcept { return support_probs_; }

  Vector sample(Rng& rng) const;
  Vector mean() const;
  /// E[feature | latent]; equals mean() for the independent kinds above.
  Vector conditional_mean(int latent_index) const;

  /// Same kind with the spread multiplied by `factor` (ball radius or support vectors).
  UniqueFeatureSampler scaled(double factor) const;

 private:
  UniqueFeatureSampler(SamplerKind kind, int dimension, double radius)
      : kind_(kind), dimension_(dimension), radius_(radius) {}

  SamplerKind kind_;
  int dimension_;
  double radius_;
  std::vector<Vector> support_;
  std::vector<double> support_probs_;
};

/// x = G [z; xi], y = H [z; zeta] with full-column-rank dictionaries.
class GenerativeModel {
 public:
  GenerativeModel(LatentDictionary latent, Matrix G, Matrix H, UniqueFeatureSampler xi_sampler,
                  UniqueFeatureSampler zeta_sampler);

  const LatentDictionary& latent() const noexcept { return latent_; }
  const Matrix& G() const noexcept { return G_; }
  const Matrix& H() const noexcept { return H_; }
  const UniqueFeatureSampler& xi_sampler() const noexcept { return xi_sampler_; }
  const UniqueFeatureSampler& zeta_sampler() const noexcept { return zeta_sampler_; }

  int K() const noexcept { return latent_.count(); }
  int K1() const noexcept { return latent_.dimension(); }
  int K2() const noexcept { return xi_sampler_.dimension(); }
  int K3() const noexcept { return zeta_sampler_.dimension(); }
  int d1() const noexcept { return static_cast<int>(G_.rows()); }
  int d2() const noexcept { return static_cast<int>(H_.rows()); }

  double G_norm() const noexcept { return G_norm_; }
  double H_norm() const noexcept { return H_norm_; }
  /// Largest bound on the unique-feature norms, R.
  double radius() const noexcept;

  Vector image(int latent_index, const Vector& xi) const;
  Vector text(int latent_index, const Vector& zeta) const;

  /// Copy with the text-side sampler replaced (prompt shift experiments).
  GenerativeModel with_zeta_sampler(UniqueFeatureSampler zeta_sampler) const;

 private:
  LatentDictionary latent_;
  Matrix G_;
  Matrix H_;
  UniqueFeatureSampler xi_sampler_;
  UniqueFeatureSampler zeta_sampler_;
  double G_norm_ = 0.0;
  double H_norm_ = 0.0;
};

struct PairedSample {
  Vector x;
  Vector y;
  int latent_index = 0;
  Vector xi;
  Vector zeta;
};

struct BatchData {
  std::vector<PairedSample> samples;

  int size() const noexcept { return static_cast<int>(samples.size()); }
  bool empty() const noexcept { return samples.empty(); }
  /// Row i holds x_i (B x d1).
  Matrix images() const;
  /// Row i holds y_i (B x d2).
  Matrix texts() const;
  std::vector<int> latents() const;
};

int sample_latent(const LatentDictionary& latent, Rng& rng);

PairedSample sample_pair(const GenerativeModel& model, SampleStreams& streams);
PairedSample sample_pair_with_latent(const GenerativeModel& model, int latent_index,
                                     SampleStreams& streams);
Vector sample_image(const GenerativeModel& model, int latent_index, SampleStreams& streams);
Vector sample_text(const GenerativeModel& model, int latent_index, SampleStreams& streams);

BatchData sample_batch(const GenerativeModel& model, int B, SampleStreams& streams);

/// Plain description of a generative model; what config files carry.
struct ModelSpec {
  enum class Family { case_study, counterexample };

  Family family = Family::case_study;
  int K = 8;
  int K1 = 9;
  int K2 = 4;
  int K3 = 4;
  double gamma = 0.5;
  std::vector<double> probs;  // empty = uniform
  SamplerKind xi_kind = SamplerKind::ball;
  SamplerKind zeta_kind = SamplerKind::ball;
  double radius = 0.5;
  int d1 = 16;
  int d2 = 16;
  bool mixing = false;
  std::uint64_t seed = 1;

  bool operator==(const ModelSpec&) const = default;
};

/// Case-study model: identity-block dictionaries padded to (d1, d2), optionally
/// premultiplied by a seeded well-conditioned mixing matrix.
GenerativeModel make_case_study_model(const ModelSpec& spec);

/// H = [I; 0], zeta uniform over {e_1, e_2} with probabilities (1/3, 2/3),
/// zero xi, identity-like G. Requires gamma < 1/3.
GenerativeModel counterexample_model(int K, double gamma, std::uint64_t seed = 0);
GenerativeModel counterexample_model(const ModelSpec& spec);

GenerativeModel build_model(const ModelSpec& spec);

/// CSV dump: sample_id, latent_index (1-based), x_0..x_{d1-1}, y_0..y_{d2-1}.
void write_samples_csv(const std::string& path, const BatchData& batch);
std::string samples_csv_header(int d1, int d2);

}  // namespace cliplab
