#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cliplab/score_models.hpp"
#include "cliplab/synthetic_data.hpp"

namespace cliplab {

enum class PromptSource { in_distribution, shifted };

/// One text-side prompt per class; prompts[k] belongs to class k.
struct PromptSet {
  std::vector<Vector> prompts;
  PromptSource source = PromptSource::in_distribution;

  int count() const noexcept { return static_cast<int>(prompts.size()); }
};

/// Draws y_k = H [v_k; zeta_k] for every k, with zeta from `shift` when given.
PromptSet sample_prompts(const GenerativeModel& gen, Rng& rng,
                         const UniqueFeatureSampler* shift = nullptr);

/// Indices of the r largest scores in descending order; ties go to the lower index.
std::vector<int> top_r_indices(const Vector& scores, int r);

std::vector<int> zero_shot_predict(const Scorer& scorer, const Vector& x, const PromptSet& prompts,
                                   int r);

struct ZeroShotOptions {
  int n_trials = 10000;
  std::optional<UniqueFeatureSampler> prompt_sampler;  // shifted prompts when set
  bool fixed_prompts = false;  // draw one prompt set up front instead of per trial
};

struct RateEstimate {
  double value = 0.0;
  double se = 0.0;
  int n_trials = 0;
};

/// Top-r error for each r over one shared set of trials, so the curve is
/// nonincreasing in r by construction.
std::map<int, RateEstimate> zero_shot_errors(const Scorer& scorer, const GenerativeModel& gen,
                                             const std::vector<int>& rs,
                                             const ZeroShotOptions& options, std::uint64_t seed);

RateEstimate zero_shot_error(const Scorer& scorer, const GenerativeModel& gen, int r,
                             const ZeroShotOptions& options, std::uint64_t seed);

/// Fraction of trials whose top-1 prediction is correct with a lead of at
/// least the threshold over the runner-up. Uses the same trials as
/// zero_shot_errors for equal seed and options.
std::map<double, double> margin_of_correct_fraction(const Scorer& scorer, const GenerativeModel& gen,
                                                    const std::vector<double>& thresholds,
                                                    const ZeroShotOptions& options,
                                                    std::uint64_t seed);

/// Mean over trials of log(1 + sum_{j != k} exp((f(x, y_j) - f(x, y_k)) / tau)),
/// which dominates top-r error times log(1 + r) trial by trial.
RateEstimate soft_margin_expectation(const Scorer& scorer, const GenerativeModel& gen, double tau,
                                     const ZeroShotOptions& options, std::uint64_t seed);

/// All 2B(B-1) within-batch margins: S(i,i) - S(j,i) then S(i,i) - S(i,j), i != j.
std::vector<double> batch_margins(const Scorer& scorer, const BatchData& batch);

/// Margins pooled over freshly sampled batches.
std::vector<double> sampled_batch_margins(const Scorer& scorer, const GenerativeModel& gen, int B,
                                          int n_batches, std::uint64_t seed);

struct AlphaPoint {
  double gamma = 0.0;
  double alpha_hat = 0.0;
  double alpha_exact = 0.0;
  double se_hat = 0.0;
  double se_exact = 0.0;
  double se_gap = 0.0;  // standard error of alpha_hat - alpha_exact (paired)
};

struct AlphaCurve {
  std::vector<AlphaPoint> points;
  double collision_probability = 0.0;  // sum_k p_k^2
  int n_pairs = 0;
};

/// 41 points over [0, 1.2].
std::vector<double> default_gamma_grid();

/// Estimates, from one pool of independent tuple pairs (x, y, z), (x', y', z'),
///   alpha_hat(g)   = P(f(x,y) - f(x,y') <= g) + P(f(x,y) - f(x',y) <= g)
///   alpha_exact(g) = the same with both events restricted to z != z'.
AlphaCurve alpha_curves(const Scorer& scorer, const GenerativeModel& gen, int n_pairs,
                        const std::vector<double>& gamma_grid, std::uint64_t seed);

std::vector<std::pair<double, double>> alpha_hat(const Scorer& scorer, const GenerativeModel& gen,
                                                 int n_pairs, const std::vector<double>& gamma_grid,
                                                 std::uint64_t seed);
std::vector<std::pair<double, double>> alpha_exact(const Scorer& scorer, const GenerativeModel& gen,
                                                   int n_pairs,
                                                   const std::vector<double>& gamma_grid,
                                                   std::uint64_t seed);

struct ConditionalVariance {
  double x_side = 0.0;  // E[Var_{x|z} f(x, y)]
  double y_side = 0.0;  // E[Var_{y|z} f(x, y)]
};

/// For each of n_samples outer draws, resamples `inner` images (texts) from the
/// same latent and takes the unbiased within-class variance.
ConditionalVariance conditional_variance(const Scorer& scorer, const GenerativeModel& gen,
                                         int n_samples, std::uint64_t seed, int inner = 8);

struct Histogram {
  std::vector<double> edges;  // bins + 1 entries
  std::vector<long> counts;
};

/// Uniform bins over [min, max] of the values; the last bin is closed.
Histogram make_histogram(const std::vector<double>& values, int bins = 60);

struct EvalReport {
  std::map<int, RateEstimate> top_r_error;
  std::vector<double> margins;
  Histogram margin_histogram;
  AlphaCurve alpha;
  std::optional<ConditionalVariance> conditional_variance;
  std::map<double, double> margin_of_correct_fraction;
};

std::string margins_csv_header();
std::string alpha_csv_header();
std::string zeroshot_csv_header();

void write_margins_csv(const std::string& path, const std::vector<double>& margins);
void write_alpha_csv(const std::string& path, const AlphaCurve& curve);
void write_zeroshot_csv(const std::string& path, const std::map<int, RateEstimate>& errors);

/// report.json plus the companion CSVs (only those with data) in `dir`.
/// Returns the file names written, relative to `dir`.
std::vector<std::string> write_eval_report(const std::string& dir, const EvalReport& report);

}  // namespace cliplab
