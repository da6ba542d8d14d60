#include "cliplab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cliplab/errors.hpp"
#include "cliplab/parallel.hpp"

namespace cliplab {

namespace {

constexpr int kTrialsPerBlock = 1024;

struct Trial {
  int label = 0;
  Vector scores;
};

int block_count(int n) { return (n + kTrialsPerBlock - 1) / kTrialsPerBlock; }

int block_size(int n, int b) { return std::min(kTrialsPerBlock, n - b * kTrialsPerBlock); }

std::vector<Trial> run_trials(const Scorer& scorer, const GenerativeModel& gen,
                              const ZeroShotOptions& options, std::uint64_t seed) {
  if (options.n_trials < 1) throw OutOfRangeError("zero-shot evaluation needs n_trials >= 1");
  const UniqueFeatureSampler* shift = options.prompt_sampler ? &*options.prompt_sampler : nullptr;
  std::optional<PromptSet> fixed;
  if (options.fixed_prompts) {
    Rng rng = make_rng(seed, "prompts");
    fixed = sample_prompts(gen, rng, shift);
  }
  const int n = options.n_trials;
  std::vector<Trial> trials(static_cast<std::size_t>(n));
  parallel_blocks(block_count(n), [&](int b) {
    SampleStreams streams(derive_seed(seed, static_cast<std::uint64_t>(b)));
    const int start = b * kTrialsPerBlock;
    for (int t = 0; t < block_size(n, b); ++t) {
      Trial& trial = trials[static_cast<std::size_t>(start + t)];
      trial.label = sample_latent(gen.latent(), streams.latent());
      const Vector x = sample_image(gen, trial.label, streams);
      if (fixed) {
        trial.scores = scorer.scores_against(x, fixed->prompts);
      } else {
        trial.scores = scorer.scores_against(x, sample_prompts(gen, streams.aux(), shift).prompts);
      }
    }
  });
  return trials;
}

// Position of the true label in the tie-broken ranking (0 = top).
int rank_of(const Trial& t) {
  const double own = t.scores(t.label);
  int rank = 0;
  for (Eigen::Index j = 0; j < t.scores.size(); ++j) {
    if (j == t.label) continue;
    if (t.scores(j) > own || (t.scores(j) == own && j < t.label)) ++rank;
  }
  return rank;
}

RateEstimate bernoulli_estimate(long hits, int n) {
  RateEstimate e;
  e.n_trials = n;
  e.value = static_cast<double>(hits) / n;
  e.se = n > 1 ? std::sqrt(e.value * (1.0 - e.value) / n) : 0.0;
  return e;
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

template <typename F>
MeanSe mean_se(std::size_t n, F value) {
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = value(i);
    const double delta = v - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (v - mean);
  }
  MeanSe out{mean, 0.0};
  if (n > 1) out.se = std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n));
  return out;
}

std::ofstream open_csv(const std::string& path, const std::string& header) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << header << '\n' << std::setprecision(17);
  return out;
}

}  // namespace

PromptSet sample_prompts(const GenerativeModel& gen, Rng& rng, const UniqueFeatureSampler* shift) {
  const UniqueFeatureSampler& sampler = shift ? *shift : gen.zeta_sampler();
  if (sampler.dimension() != gen.K3()) throw DimensionError("prompt sampler dimension differs from K3");
  PromptSet set;
  set.source = shift ? PromptSource::shifted : PromptSource::in_distribution;
  set.prompts.reserve(static_cast<std::size_t>(gen.K()));
  for (int k = 0; k < gen.K(); ++k) set.prompts.push_back(gen.text(k, sampler.sample(rng)));
  return set;
}

std::vector<int> top_r_indices(const Vector& scores, int r) {
  if (r < 1 || r > scores.size()) {
    throw OutOfRangeError("r must lie in [1, " + std::to_string(scores.size()) + "]");
  }
  std::vector<int> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) > scores(b); });
  idx.resize(static_cast<std::size_t>(r));
  return idx;
}

std::vector<int> zero_shot_predict(const Scorer& scorer, const Vector& x, const PromptSet& prompts,
                                   int r) {
  if (prompts.count() == 0) throw EmptyBatchError("empty prompt set");
  return top_r_indices(scorer.scores_against(x, prompts.prompts), r);
}

std::map<int, RateEstimate> zero_shot_errors(const Scorer& scorer, const GenerativeModel& gen,
                                             const std::vector<int>& rs,
                                             const ZeroShotOptions& options, std::uint64_t seed) {
  for (int r : rs) {
    if (r < 1 || r > gen.K()) throw OutOfRangeError("r must lie in [1, K]");
  }
  const auto trials = run_trials(scorer, gen, options, seed);
  std::vector<int> ranks;
  ranks.reserve(trials.size());
  for (const auto& t : trials) ranks.push_back(rank_of(t));
  std::map<int, RateEstimate> out;
  for (int r : rs) {
    const long misses = std::count_if(ranks.begin(), ranks.end(), [r](int rank) { return rank >= r; });
    out[r] = bernoulli_estimate(misses, options.n_trials);
  }
  return out;
}

RateEstimate zero_shot_error(const Scorer& scorer, const GenerativeModel& gen, int r,
                             const ZeroShotOptions& options, std::uint64_t seed) {
  return zero_shot_errors(scorer, gen, {r}, options, seed).at(r);
}

std::map<double, double> margin_of_correct_fraction(const Scorer& scorer, const GenerativeModel& gen,
                                                    const std::vector<double>& thresholds,
                                                    const ZeroShotOptions& options,
                                                    std::uint64_t seed) {
  for (double th : thresholds) {
    if (!(th >= 0.0)) throw OutOfRangeError("margin thresholds must be nonnegative");
  }
  const auto trials = run_trials(scorer, gen, options, seed);
  std::vector<double> leads;  // -inf when top-1 is wrong
  leads.reserve(trials.size());
  for (const auto& t : trials) {
    if (rank_of(t) != 0) {
      leads.push_back(-std::numeric_limits<double>::infinity());
      continue;
    }
    double runner_up = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < t.scores.size(); ++j)
      if (j != t.label) runner_up = std::max(runner_up, t.scores(j));
    leads.push_back(t.scores(t.label) - runner_up);
  }
  std::map<double, double> out;
  for (double th : thresholds) {
    const long hits = std::count_if(leads.begin(), leads.end(), [th](double l) { return l >= th; });
    out[th] = static_cast<double>(hits) / static_cast<double>(leads.size());
  }
  return out;
}

RateEstimate soft_margin_expectation(const Scorer& scorer, const GenerativeModel& gen, double tau,
                                     const ZeroShotOptions& options, std::uint64_t seed) {
  if (!(tau > 0.0)) throw OutOfRangeError("temperature must be positive");
  const auto trials = run_trials(scorer, gen, options, seed);
  const MeanSe ms = mean_se(trials.size(), [&](std::size_t i) {
    const Trial& t = trials[i];
    const Eigen::ArrayXd diff = (t.scores.array() - t.scores(t.label)) / tau;
    const double m = std::max(0.0, diff.maxCoeff());
    // log(1 + sum_{j != k} e^{d_j}) = log(sum_j e^{d_j}) since d_k = 0.
    return m + std::log((diff - m).exp().sum());
  });
  return RateEstimate{ms.mean, ms.se, options.n_trials};
}

std::vector<double> batch_margins(const Scorer& scorer, const BatchData& batch) {
  const int B = batch.size();
  if (B < 2) throw DegenerateInputError("batch margins need B >= 2");
  const Matrix S = scorer.score_matrix(batch.images(), batch.texts());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(2 * B * (B - 1)));
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < B; ++j)
      if (j != i) out.push_back(S(i, i) - S(j, i));
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < B; ++j)
      if (j != i) out.push_back(S(i, i) - S(i, j));
  return out;
}

std::vector<double> sampled_batch_margins(const Scorer& scorer, const GenerativeModel& gen, int B,
                                          int n_batches, std::uint64_t seed) {
  if (n_batches < 1) throw OutOfRangeError("need at least one batch");
  SampleStreams streams(derive_seed(seed, "margins"));
  std::vector<double> out;
  for (int b = 0; b < n_batches; ++b) {
    const auto m = batch_margins(scorer, sample_batch(gen, B, streams));
    out.insert(out.end(), m.begin(), m.end());
  }
  return out;
}

std::vector<double> default_gamma_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 40; ++i) grid.push_back(1.2 * i / 40.0);
  return grid;
}

AlphaCurve alpha_curves(const Scorer& scorer, const GenerativeModel& gen, int n_pairs,
                        const std::vector<double>& gamma_grid, std::uint64_t seed) {
  if (n_pairs < 100) throw OutOfRangeError("alpha estimation needs n_pairs >= 100");
  struct PairDiff {
    double text_side;   // f(x,y) - f(x,y')
    double image_side;  // f(x,y) - f(x',y)
    bool same;
  };
  std::vector<PairDiff> diffs(static_cast<std::size_t>(n_pairs));
  parallel_blocks(block_count(n_pairs), [&](int b) {
    SampleStreams streams(derive_seed(derive_seed(seed, "alpha"), static_cast<std::uint64_t>(b)));
    const int start = b * kTrialsPerBlock;
    for (int t = 0; t < block_size(n_pairs, b); ++t) {
      const PairedSample a = sample_pair(gen, streams);
      const PairedSample c = sample_pair(gen, streams);
      const double fxy = scorer.score(a.x, a.y);
      diffs[static_cast<std::size_t>(start + t)] = {fxy - scorer.score(a.x, c.y),
                                                    fxy - scorer.score(c.x, a.y),
                                                    a.latent_index == c.latent_index};
    }
  });

  AlphaCurve curve;
  curve.n_pairs = n_pairs;
  curve.collision_probability = gen.latent().collision_probability();
  for (double g : gamma_grid) {
    const auto hat = [&](std::size_t i) {
      return double(diffs[i].text_side <= g) + double(diffs[i].image_side <= g);
    };
    const auto exact = [&](std::size_t i) { return diffs[i].same ? 0.0 : hat(i); };
    const MeanSe h = mean_se(diffs.size(), hat);
    const MeanSe e = mean_se(diffs.size(), exact);
    const MeanSe gap = mean_se(diffs.size(), [&](std::size_t i) { return hat(i) - exact(i); });
    curve.points.push_back({g, h.mean, e.mean, h.se, e.se, gap.se});
  }
  return curve;
}

std::vector<std::pair<double, double>> alpha_hat(const Scorer& scorer, const GenerativeModel& gen,
                                                 int n_pairs, const std::vector<double>& gamma_grid,
                                                 std::uint64_t seed) {
  std::vector<std::pair<double, double>> out;
  for (const auto& p : alpha_curves(scorer, gen, n_pairs, gamma_grid, seed).points)
    out.emplace_back(p.gamma, p.alpha_hat);
  return out;
}

std::vector<std::pair<double, double>> alpha_exact(const Scorer& scorer, const GenerativeModel& gen,
                                                   int n_pairs,
                                                   const std::vector<double>& gamma_grid,
                                                   std::uint64_t seed) {
  std::vector<std::pair<double, double>> out;
  for (const auto& p : alpha_curves(scorer, gen, n_pairs, gamma_grid, seed).points)
    out.emplace_back(p.gamma, p.alpha_exact);
  return out;
}

ConditionalVariance conditional_variance(const Scorer& scorer, const GenerativeModel& gen,
                                         int n_samples, std::uint64_t seed, int inner) {
  if (n_samples < 1) throw OutOfRangeError("conditional variance needs n_samples >= 1");
  if (inner < 2) throw OutOfRangeError("conditional variance needs at least 2 inner draws");
  std::vector<double> x_var(static_cast<std::size_t>(n_samples));
  std::vector<double> y_var(static_cast<std::size_t>(n_samples));
  const auto variance = [](const std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double e : v) s += (e - m) * (e - m);
    return s / static_cast<double>(v.size() - 1);
  };
  parallel_blocks(block_count(n_samples), [&](int b) {
    SampleStreams streams(derive_seed(derive_seed(seed, "cvar"), static_cast<std::uint64_t>(b)));
    std::vector<double> f(static_cast<std::size_t>(inner));
    const int start = b * kTrialsPerBlock;
    for (int t = 0; t < block_size(n_samples, b); ++t) {
      const int z = sample_latent(gen.latent(), streams.latent());
      const Vector y = sample_text(gen, z, streams);
      for (int i = 0; i < inner; ++i) f[static_cast<std::size_t>(i)] = scorer.score(sample_image(gen, z, streams), y);
      x_var[static_cast<std::size_t>(start + t)] = variance(f);
      const Vector x = sample_image(gen, z, streams);
      for (int i = 0; i < inner; ++i) f[static_cast<std::size_t>(i)] = scorer.score(x, sample_text(gen, z, streams));
      y_var[static_cast<std::size_t>(start + t)] = variance(f);
    }
  });
  ConditionalVariance out;
  out.x_side = std::accumulate(x_var.begin(), x_var.end(), 0.0) / n_samples;
  out.y_side = std::accumulate(y_var.begin(), y_var.end(), 0.0) / n_samples;
  return out;
}

Histogram make_histogram(const std::vector<double>& values, int bins) {
  if (bins < 1) throw OutOfRangeError("histogram needs at least one bin");
  if (values.empty()) throw EmptyBatchError("histogram of no values");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  double lo = *lo_it;
  double hi = *hi_it;
  if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (int i = 0; i <= bins; ++i) h.edges.push_back(lo + (hi - lo) * i / bins);
  for (double v : values) {
    auto bin = static_cast<int>((v - lo) / (hi - lo) * bins);
    bin = std::clamp(bin, 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(bin)];
  }
  return h;
}

std::string margins_csv_header() { return "value"; }
std::string alpha_csv_header() { return "gamma,alpha_hat,alpha_exact,se"; }
std::string zeroshot_csv_header() { return "r,error,se"; }

void write_margins_csv(const std::string& path, const std::vector<double>& margins) {
  auto out = open_csv(path, margins_csv_header());
  for (double m : margins) out << m << '\n';
}

void write_alpha_csv(const std::string& path, const AlphaCurve& curve) {
  auto out = open_csv(path, alpha_csv_header());
  for (const auto& p : curve.points)
    out << p.gamma << ',' << p.alpha_hat << ',' << p.alpha_exact << ',' << p.se_hat << '\n';
}

void write_zeroshot_csv(const std::string& path, const std::map<int, RateEstimate>& errors) {
  auto out = open_csv(path, zeroshot_csv_header());
  for (const auto& [r, e] : errors) out << r << ',' << e.value << ',' << e.se << '\n';
}

std::vector<std::string> write_eval_report(const std::string& dir, const EvalReport& report) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<std::string> files;
  nlohmann::ordered_json j;

  if (!report.top_r_error.empty()) {
    auto& z = j["top_r_error"];
    for (const auto& [r, e] : report.top_r_error)
      z[std::to_string(r)] = {{"error", e.value}, {"se", e.se}, {"n_trials", e.n_trials}};
    write_zeroshot_csv((fs::path(dir) / "zeroshot.csv").string(), report.top_r_error);
    files.emplace_back("zeroshot.csv");
  }
  if (!report.margins.empty()) {
    j["margin_histogram"] = {{"edges", report.margin_histogram.edges},
                             {"counts", report.margin_histogram.counts}};
    write_margins_csv((fs::path(dir) / "margins.csv").string(), report.margins);
    files.emplace_back("margins.csv");
  }
  if (!report.alpha.points.empty()) {
    j["alpha"]["collision_probability"] = report.alpha.collision_probability;
    j["alpha"]["n_pairs"] = report.alpha.n_pairs;
    write_alpha_csv((fs::path(dir) / "alpha.csv").string(), report.alpha);
    files.emplace_back("alpha.csv");
  }
  if (report.conditional_variance) {
    j["conditional_variance"] = {{"x_side", report.conditional_variance->x_side},
                                 {"y_side", report.conditional_variance->y_side}};
  }
  if (!report.margin_of_correct_fraction.empty()) {
    auto& m = j["margin_of_correct_fraction"];
    m = nlohmann::ordered_json::array();
    for (const auto& [th, frac] : report.margin_of_correct_fraction)
      m.push_back({{"threshold", th}, {"fraction", frac}});
  }

  std::ofstream out(fs::path(dir) / "report.json");
  if (!out) throw IoError("cannot write report.json in '" + dir + "'");
  out << j.dump(2) << '\n';
  files.insert(files.begin(), "report.json");
  return files;
}

}  // namespace cliplab
