#include "cliplab/losses.hpp"

#include <cmath>
#include <vector>

#include "cliplab/errors.hpp"

namespace cliplab {

namespace {

// log sum_j exp((a_j - a_ref) / tau), written to return the exact 0 only when
// every other candidate underflows.
template <typename Vec>
double shifted_logsumexp(const Vec& a, Eigen::Index ref, double tau) {
  Eigen::Index top = 0;
  const double m = a.maxCoeff(&top);
  double rest = 0.0;
  for (Eigen::Index j = 0; j < a.size(); ++j)
    if (j != top) rest += std::exp((a(j) - m) / tau);
  return (m - a(ref)) / tau + std::log1p(rest);
}

void check_scores(const Matrix& S, double tau) {
  if (S.rows() == 0) throw EmptyBatchError("contrastive loss of an empty batch");
  if (S.rows() != S.cols()) throw DimensionError("score matrix must be square");
  if (!(tau > 0.0)) throw OutOfRangeError("temperature must be positive");
  if (!S.allFinite()) throw NonFiniteError("non-finite score in batch");
}

Matrix batch_scores(const LinearScoreModel& model, const BatchData& batch) {
  if (batch.empty()) throw EmptyBatchError("empty batch");
  return model.score_matrix(batch.images(), batch.texts());
}

}  // namespace

std::string to_string(RegularizerKind kind) {
  switch (kind) {
    case RegularizerKind::none:
      return "none";
    case RegularizerKind::positive:
      return "positive";
    case RegularizerKind::negative:
      return "negative";
  }
  return "unknown";
}

RegularizerKind regularizer_from_string(const std::string& name) {
  if (name == "none") return RegularizerKind::none;
  if (name == "positive") return RegularizerKind::positive;
  if (name == "negative") return RegularizerKind::negative;
  throw OutOfRangeError("unknown regularizer kind '" + name + "'");
}

LossValue clip_loss_from_scores(const Matrix& S, double tau, bool keep_terms) {
  check_scores(S, tau);
  const auto B = S.rows();
  LossValue out;
  if (keep_terms) out.per_sample_terms.reserve(static_cast<std::size_t>(B));
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    // Images compete for text i (column i); texts compete for image i (row i).
    const double term = shifted_logsumexp(S.col(i), i, tau) + shifted_logsumexp(S.row(i), i, tau);
    total += term;
    if (keep_terms) out.per_sample_terms.push_back(term);
  }
  out.value = total / static_cast<double>(B);
  return out;
}

LossValue clip_batch_loss(const LinearScoreModel& model, const BatchData& batch, bool keep_terms) {
  return clip_loss_from_scores(batch_scores(model, batch), model.tau(), keep_terms);
}

ContrastiveSoftmax contrastive_softmax(const Matrix& S, double tau) {
  check_scores(S, tau);
  const auto B = S.rows();
  ContrastiveSoftmax out;
  const Eigen::ArrayXd diag = S.diagonal().array();

  // Text direction (rows). The arg-max entry is exactly exp(0) = 1; it is
  // held out of the remainder sum so log1p sees the small terms undiluted.
  Eigen::ArrayXd row_max(B), col_max(B);
  std::vector<Eigen::Index> row_top(static_cast<std::size_t>(B)), col_top(static_cast<std::size_t>(B));
  for (Eigen::Index i = 0; i < B; ++i) {
    row_max(i) = S.row(i).maxCoeff(&row_top[static_cast<std::size_t>(i)]);
    col_max(i) = S.col(i).maxCoeff(&col_top[static_cast<std::size_t>(i)]);
  }
  Eigen::ArrayXXd E = ((S.array().colwise() - row_max) / tau).exp();
  Eigen::ArrayXXd F = ((S.array().rowwise() - col_max.transpose()) / tau).exp();
  for (Eigen::Index i = 0; i < B; ++i) {
    E(i, row_top[static_cast<std::size_t>(i)]) = 0.0;
    F(col_top[static_cast<std::size_t>(i)], i) = 0.0;
  }
  const Eigen::ArrayXd row_rest = E.rowwise().sum();
  const Eigen::ArrayXd col_rest = F.colwise().sum().transpose();
  for (Eigen::Index i = 0; i < B; ++i) {
    E(i, row_top[static_cast<std::size_t>(i)]) = 1.0;
    F(col_top[static_cast<std::size_t>(i)], i) = 1.0;
  }
  out.text_softmax = (E.colwise() / (1.0 + row_rest)).matrix();
  out.image_softmax = (F.rowwise() / (1.0 + col_rest).transpose()).matrix();
  const double total = ((row_max - diag) / tau + row_rest.log1p()).sum() +
                       ((col_max - diag) / tau + col_rest.log1p()).sum();
  out.loss = total / static_cast<double>(B);
  return out;
}

PopulationEstimate population_loss_estimate(const LinearScoreModel& model,
                                            const GenerativeModel& gen, int B, int n_batches,
                                            SampleStreams& streams) {
  if (n_batches < 2) throw OutOfRangeError("population estimate needs at least 2 batches");
  // Welford keeps the variance accurate when the losses sit far from zero.
  double mean = 0.0;
  double m2 = 0.0;
  for (int b = 0; b < n_batches; ++b) {
    const double v = clip_batch_loss(model, sample_batch(gen, B, streams)).value;
    const double delta = v - mean;
    mean += delta / (b + 1);
    m2 += delta * (v - mean);
  }
  PopulationEstimate est;
  est.n_batches = n_batches;
  est.mean = mean;
  est.standard_error = std::sqrt(m2 / (n_batches - 1)) / std::sqrt(static_cast<double>(n_batches));
  return est;
}

LossValue square_loss(const Encoder& encoder, const BatchData& batch) {
  if (batch.empty()) throw EmptyBatchError("square loss of an empty batch");
  LossValue out;
  out.per_sample_terms.reserve(batch.samples.size());
  double total = 0.0;
  for (const auto& s : batch.samples) {
    const Vector g = encoder(s.x);
    if (g.size() != s.y.size()) {
      throw DimensionError("encoder output has dimension " + std::to_string(g.size()) +
                           ", text has " + std::to_string(s.y.size()));
    }
    const double term = (g - s.y).squaredNorm();
    out.per_sample_terms.push_back(term);
    total += term;
  }
  out.value = total / batch.size();
  return out;
}

LossValue positive_pair_regularizer(const LinearScoreModel& model, const BatchData& batch) {
  if (batch.empty()) throw EmptyBatchError("regularizer of an empty batch");
  LossValue out;
  double total = 0.0;
  for (const auto& s : batch.samples) {
    const double term = -model.score(s.x, s.y);
    out.per_sample_terms.push_back(term);
    total += term;
  }
  out.value = total / batch.size();
  return out;
}

double default_negative_lambda(int B) {
  if (B < 2) throw DegenerateInputError("negative-pair regularizer needs B >= 2");
  return 0.1 / (static_cast<double>(B) * B - B);
}

LossValue negative_pair_regularizer(const LinearScoreModel& model, const BatchData& batch,
                                    std::optional<double> lambda) {
  const int B = batch.size();
  if (B < 2) throw DegenerateInputError("negative-pair regularizer needs B >= 2");
  const double weight = lambda.value_or(default_negative_lambda(B));
  const Matrix S = batch_scores(model, batch);
  LossValue out;
  out.value = weight * (S.sum() - S.trace());
  return out;
}

LossValue regularized_loss(const LinearScoreModel& model, const BatchData& batch, double lambda,
                           RegularizerKind kind) {
  if (!(lambda >= 0.0)) throw OutOfRangeError("regularization weight must be nonnegative");
  LossValue out = clip_batch_loss(model, batch);
  switch (kind) {
    case RegularizerKind::none:
      break;
    case RegularizerKind::positive:
      out.value += lambda * positive_pair_regularizer(model, batch).value;
      break;
    case RegularizerKind::negative:
      out.value += negative_pair_regularizer(model, batch, lambda).value;
      break;
  }
  return out;
}

LossValue oracle_two_sided_regularizer(const LinearScoreModel& model, const BatchData& batch) {
  const Matrix S = batch_scores(model, batch);
  const auto z = batch.latents();
  double pos = 0.0;
  double neg = 0.0;
  int n_pos = 0;
  int n_neg = 0;
  for (int i = 0; i < batch.size(); ++i) {
    for (int j = 0; j < batch.size(); ++j) {
      if (z[static_cast<std::size_t>(i)] == z[static_cast<std::size_t>(j)]) {
        pos += S(i, j);
        ++n_pos;
      } else {
        neg += S(i, j);
        ++n_neg;
      }
    }
  }
  LossValue out;
  out.value = (n_neg ? neg / n_neg : 0.0) - pos / n_pos;
  return out;
}

}  // namespace cliplab
