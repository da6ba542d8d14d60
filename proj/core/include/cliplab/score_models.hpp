#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cliplab/synthetic_data.hpp"

namespace cliplab {

enum class SimilarityKind { inner, cosine, negative_l2 };

std::string to_string(SimilarityKind kind);
SimilarityKind similarity_from_string(const std::string& name);

/// sim(g, h) for the three supported scores. Cosine with a zero-norm
/// argument raises DegenerateInputError.
double similarity(const Vector& g, const Vector& h, SimilarityKind kind);

/// Locked-text score f(x, y) = sim(W x, y); the text embedding is the identity.
class LinearScoreModel {
 public:
  LinearScoreModel(Matrix W, double tau, SimilarityKind kind = SimilarityKind::inner);

  const Matrix& W() const noexcept { return W_; }
  Matrix& W() noexcept { return W_; }
  double tau() const noexcept { return tau_; }
  void set_tau(double tau);
  SimilarityKind similarity_kind() const noexcept { return kind_; }

  int text_dim() const noexcept { return static_cast<int>(W_.rows()); }
  int image_dim() const noexcept { return static_cast<int>(W_.cols()); }

  Vector embed(const Vector& x) const;
  double score(const Vector& x, const Vector& y) const;
  /// S(i, j) = f(x_i, y_j) for rows x_i of X and y_j of Y.
  Matrix score_matrix(const Matrix& X, const Matrix& Y) const;

 private:
  Matrix W_;
  double tau_;
  SimilarityKind kind_;
};

struct EmbeddingPairView {
  Vector g_of_x;
  Vector h_of_y;
};

/// The embeddings the similarity actually compares: unit-normalized copies
/// for cosine, raw vectors otherwise.
EmbeddingPairView embedding_view(const LinearScoreModel& model, const Vector& x, const Vector& y);

/// W* = H (H^T H)^{-1} P (G^T G)^{-1} G^T with P the rank-K1 block identity,
/// so that H^T W* G = P and <W* x, y'> = <z, z'>.
Matrix completeness_weights(const GenerativeModel& model);

/// The (K1+K3) x (K1+K2) block projection P: identity on the shared coordinates.
Matrix shared_projection(const GenerativeModel& model);

/// Minimizer of E||g(x) - y||^2: recovers z from x exactly, returns H [z; E[zeta | z]].
class BayesSquareEncoder {
 public:
  explicit BayesSquareEncoder(const GenerativeModel& model);

  Vector operator()(const Vector& x) const;
  int output_dim() const noexcept { return static_cast<int>(H_.rows()); }

 private:
  Eigen::ColPivHouseholderQR<Matrix> g_qr_;
  Matrix H_;
  Matrix latent_vectors_;
  std::vector<Vector> zeta_means_;
  int k1_;
};

/// Type-erased score function used by the evaluation routines. Either an
/// image embedding plus a similarity kind, or an arbitrary f(x, y).
class Scorer {
 public:
  using Embedding = std::function<Vector(const Vector&)>;
  using ScoreFn = std::function<double(const Vector&, const Vector&)>;

  Scorer(const LinearScoreModel& model);  // NOLINT(google-explicit-constructor)
  Scorer(Embedding embedding, SimilarityKind kind);
  static Scorer from_function(ScoreFn fn);
  static Scorer bayes(const GenerativeModel& model, SimilarityKind kind);

  double score(const Vector& x, const Vector& y) const;
  /// f(x, texts[k]) for every k, embedding x once.
  Vector scores_against(const Vector& x, const std::vector<Vector>& texts) const;
  Matrix score_matrix(const Matrix& X, const Matrix& Y) const;

 private:
  Scorer() = default;

  Embedding embedding_;
  SimilarityKind kind_ = SimilarityKind::inner;
  ScoreFn fn_;
};

// Weight files: 16-byte header ("CLPLABW1", uint32 rows, uint32 cols, little
// endian) followed by row-major float64 values.
void write_weights_binary(const std::string& path, const Matrix& W);
Matrix read_weights_binary(const std::string& path);
void write_weights_csv(const std::string& path, const Matrix& W);
Matrix read_weights_csv(const std::string& path);

}  // namespace cliplab
