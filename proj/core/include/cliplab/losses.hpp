#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cliplab/score_models.hpp"
#include "cliplab/synthetic_data.hpp"

namespace cliplab {

struct LossValue {
  double value = 0.0;
  std::vector<double> per_sample_terms;  // empty unless requested
};

struct PopulationEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  int n_batches = 0;
};

enum class RegularizerKind { none, positive, negative };

std::string to_string(RegularizerKind kind);
RegularizerKind regularizer_from_string(const std::string& name);

/// Symmetric contrastive loss from a score matrix S(i, j) = f(x_i, y_j).
///
/// Each direction is evaluated as log sum_j exp((S(j,i) - S(i,i)) / tau) with
/// the row maximum factored out first, and the remainder summed through
/// log1p so a dominant diagonal does not round the loss to zero.
/// Per-sample terms (image-side plus text-side for pair i) are kept when asked.
LossValue clip_loss_from_scores(const Matrix& S, double tau, bool keep_terms = false);

LossValue clip_batch_loss(const LinearScoreModel& model, const BatchData& batch,
                          bool keep_terms = false);

/// Softmax weights of both directions alongside the loss; the trainer's
/// gradient is built from these.
struct ContrastiveSoftmax {
  double loss = 0.0;
  Matrix text_softmax;   // row i: softmax_j S(i, j) / tau   (text candidates for image i)
  Matrix image_softmax;  // column i: softmax_j S(j, i) / tau (image candidates for text i)
};
ContrastiveSoftmax contrastive_softmax(const Matrix& S, double tau);

/// Mean and standard error of the batch loss over freshly sampled batches.
PopulationEstimate population_loss_estimate(const LinearScoreModel& model,
                                            const GenerativeModel& gen, int B, int n_batches,
                                            SampleStreams& streams);

using Encoder = std::function<Vector(const Vector&)>;

/// Mean over the batch of ||encoder(x_i) - y_i||^2.
LossValue square_loss(const Encoder& encoder, const BatchData& batch);

/// -(1/B) sum_i f(x_i, y_i).
LossValue positive_pair_regularizer(const LinearScoreModel& model, const BatchData& batch);

double default_negative_lambda(int B);

/// lambda * sum_{i != j} f(x_i, y_j); lambda defaults to 0.1 / (B^2 - B).
LossValue negative_pair_regularizer(const LinearScoreModel& model, const BatchData& batch,
                                    std::optional<double> lambda = std::nullopt);

/// Contrastive loss plus lambda times the chosen regularizer. For the
/// negative kind, lambda is the per-pair weight of the off-diagonal sum.
LossValue regularized_loss(const LinearScoreModel& model, const BatchData& batch, double lambda,
                           RegularizerKind kind);

/// Two-sided regularizer with exact positive / negative sets, available only
/// with latent labels: mean score over cross-latent pairs minus mean score
/// over same-latent pairs (diagonal included).
LossValue oracle_two_sided_regularizer(const LinearScoreModel& model, const BatchData& batch);

}  // namespace cliplab
