#include "cliplab/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "cliplab/errors.hpp"
#include "cliplab/evaluation.hpp"
#include "cliplab/parallel.hpp"
#include "cliplab/rng.hpp"
#include "cliplab/score_models.hpp"

namespace cliplab {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Names and defaults

std::string to_string(ExperimentId id) {
  switch (id) {
    case ExperimentId::E1_temp_margin:
      return "E1_temp_margin";
    case ExperimentId::E2_clip_vs_square:
      return "E2_clip_vs_square";
    case ExperimentId::E3_regularization:
      return "E3_regularization";
    case ExperimentId::E4_concentration:
      return "E4_concentration";
    case ExperimentId::E5_shifted_prompts:
      return "E5_shifted_prompts";
  }
  return "unknown";
}

std::optional<ExperimentId> experiment_from_string(const std::string& name) {
  for (const auto& info : list_experiments())
    if (to_string(info.id) == name) return info.id;
  return std::nullopt;
}

std::vector<ExperimentInfo> list_experiments() {
  return {
      {ExperimentId::E1_temp_margin,
       "within-batch margin distributions of models trained at several temperatures"},
      {ExperimentId::E2_clip_vs_square,
       "zero-shot error of contrastive training vs the Bayes square-loss encoder"},
      {ExperimentId::E3_regularization,
       "margin-of-correct fractions with and without the positive-pair regularizer"},
      {ExperimentId::E4_concentration, "deviation of pool loss from population loss vs pool size"},
      {ExperimentId::E5_shifted_prompts, "zero-shot error under increasingly shifted prompts"},
  };
}

ExperimentConfig default_config(ExperimentId id) {
  ExperimentConfig c;
  c.experiment = id;
  c.train.iterations = 2000;
  switch (id) {
    case ExperimentId::E1_temp_margin:
      c.train.init = InitKind::seeded_random;
      c.train.init_scale = 1e-3;
      break;
    case ExperimentId::E2_clip_vs_square:
      c.model.family = ModelSpec::Family::counterexample;
      c.model.K = 4;
      c.model.K1 = 5;
      c.model.K2 = 1;
      c.model.K3 = 2;
      c.model.gamma = 0.2;
      c.model.xi_kind = SamplerKind::zero;
      c.model.zeta_kind = SamplerKind::discrete;
      c.model.radius = 1.0;
      c.model.d1 = 6;
      c.model.d2 = 8;
      c.eval.n_trials = 100000;
      c.eval.r_values = {1, 2};
      break;
    case ExperimentId::E3_regularization:
      c.model.xi_kind = SamplerKind::zero;
      c.model.zeta_kind = SamplerKind::zero;
      c.model.radius = 0.0;
      c.train.tau = 0.005;
      c.train.eta = 1.0;
      c.train.iterations = 200;
      c.train.init = InitKind::margin_trap;
      break;
    case ExperimentId::E4_concentration:
    case ExperimentId::E5_shifted_prompts:
      break;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::string family_name(ModelSpec::Family f) {
  return f == ModelSpec::Family::counterexample ? "counterexample" : "case_study";
}

json model_json(const ModelSpec& m) {
  return {{"family", family_name(m.family)},
          {"K", m.K},
          {"K1", m.K1},
          {"K2", m.K2},
          {"K3", m.K3},
          {"gamma", m.gamma},
          {"probs", m.probs},
          {"xi_kind", to_string(m.xi_kind)},
          {"zeta_kind", to_string(m.zeta_kind)},
          {"radius", m.radius},
          {"d1", m.d1},
          {"d2", m.d2},
          {"mixing", m.mixing},
          {"seed", m.seed}};
}

json train_json(const TrainConfig& t) {
  return {{"eta", t.eta},
          {"lr_constant", t.lr_constant},
          {"iterations", t.iterations},
          {"batch_size", t.batch_size},
          {"tau", t.tau},
          {"trainable_tau", t.trainable_tau},
          {"tau_min", t.tau_min},
          {"tau_max", t.tau_max},
          {"tau_eta", t.tau_eta},
          {"lambda", t.lambda},
          {"reg_kind", to_string(t.reg_kind)},
          {"init", to_string(t.init)},
          {"init_scale", t.init_scale},
          {"pool_batches", t.pool_batches},
          {"fresh_sampling", t.fresh_sampling},
          {"similarity", to_string(t.similarity)},
          {"fd_step", t.fd_step},
          {"early_stop", t.early_stop},
          {"early_stop_window", t.early_stop_window},
          {"early_stop_tol", t.early_stop_tol},
          {"divergence_threshold", t.divergence_threshold}};
}

json eval_json(const EvalConfig& e) {
  return {{"n_trials", e.n_trials},
          {"r_values", e.r_values},
          {"eval_batch_size", e.eval_batch_size},
          {"margin_batches", e.margin_batches},
          {"histogram_bins", e.histogram_bins},
          {"alpha_pairs", e.alpha_pairs},
          {"gamma_grid", e.gamma_grid},
          {"variance_samples", e.variance_samples},
          {"thresholds", e.thresholds}};
}

json params_json(const ExperimentParams& p) {
  return {{"temperatures", p.temperatures},
          {"reg_lambda", p.reg_lambda},
          {"negative_lambda", p.negative_lambda ? json(*p.negative_lambda) : json(nullptr)},
          {"pool_sizes", p.pool_sizes},
          {"repeats", p.repeats},
          {"population_batches", p.population_batches},
          {"wstar_scale", p.wstar_scale},
          {"shift_factors", p.shift_factors},
          {"record_wall_time", p.record_wall_time}};
}

// Reads typed fields out of one JSON object, collecting problems with their
// dotted paths instead of stopping at the first.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string path, std::vector<std::string>& problems)
      : obj_(obj), path_(std::move(path)), problems_(problems) {}

  ~FieldReader() {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) problems_.push_back(where(key) + ": unknown field");
    }
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  void integer(const std::string& key, int& out) {
    if (!take(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_number_integer()) return type_error(key, "an integer");
    out = v.get<int>();
  }

  void unsigned_integer(const std::string& key, std::uint64_t& out) {
    if (!take(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_number_unsigned()) return type_error(key, "a nonnegative integer");
    out = v.get<std::uint64_t>();
  }

  void number(const std::string& key, double& out) {
    if (!take(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_number()) return type_error(key, "a number");
    out = v.get<double>();
  }

  void optional_number(const std::string& key, std::optional<double>& out) {
    if (!take(key)) return;
    const json& v = obj_.at(key);
    if (v.is_null()) {
      out.reset();
    } else if (v.is_number()) {
      out = v.get<double>();
    } else {
      type_error(key, "a number or null");
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (!take(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_boolean()) return type_error(key, "true or false");
    out = v.get<bool>();
  }

  void string(const std::string& key, std::string& out) {
    if (!take(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_string()) return type_error(key, "a string");
    out = v.get<std::string>();
  }

  template <typename T>
  void list(const std::string& key, std::vector<T>& out) {
    if (!take(key)) return;
    const json& v = obj_.at(key);
    const char* want = std::is_integral_v<T> ? "a list of integers" : "a list of numbers";
    if (!v.is_array()) return type_error(key, want);
    std::vector<T> tmp;
    for (const auto& e : v) {
      if (std::is_integral_v<T> ? !e.is_number_integer() : !e.is_number()) return type_error(key, want);
      tmp.push_back(e.get<T>());
    }
    out = std::move(tmp);
  }

  // String field mapped through a parser that throws on unknown names.
  template <typename T, typename Parse>
  void named(const std::string& key, T& out, Parse parse) {
    std::string name;
    if (!has(key)) {
      seen_.insert(key);
      return;
    }
    string(key, name);
    if (!obj_.at(key).is_string()) return;
    try {
      out = parse(name);
    } catch (const Error& e) {
      problems_.push_back(where(key) + ": " + e.what());
    }
  }

  const json* object(const std::string& key) {
    if (!take(key)) return nullptr;
    const json& v = obj_.at(key);
    if (!v.is_object()) {
      type_error(key, "an object");
      return nullptr;
    }
    return &v;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  bool take(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  void type_error(const std::string& key, const char* want) {
    problems_.push_back(where(key) + ": expected " + want);
  }

  const json& obj_;
  std::string path_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

void read_model(const json& j, ModelSpec& m, std::vector<std::string>& problems) {
  FieldReader r(j, "model", problems);
  r.named("family", m.family, [](const std::string& s) {
    if (s == "case_study") return ModelSpec::Family::case_study;
    if (s == "counterexample") return ModelSpec::Family::counterexample;
    throw OutOfRangeError("unknown model family '" + s + "' (case_study, counterexample)");
  });
  r.integer("K", m.K);
  r.integer("K1", m.K1);
  r.integer("K2", m.K2);
  r.integer("K3", m.K3);
  r.number("gamma", m.gamma);
  r.list("probs", m.probs);
  r.named("xi_kind", m.xi_kind, sampler_kind_from_string);
  r.named("zeta_kind", m.zeta_kind, sampler_kind_from_string);
  r.number("radius", m.radius);
  r.integer("d1", m.d1);
  r.integer("d2", m.d2);
  r.boolean("mixing", m.mixing);
  r.unsigned_integer("seed", m.seed);
}

void read_train(const json& j, TrainConfig& t, std::vector<std::string>& problems) {
  FieldReader r(j, "train", problems);
  r.number("eta", t.eta);
  r.number("lr_constant", t.lr_constant);
  r.integer("iterations", t.iterations);
  r.integer("batch_size", t.batch_size);
  r.number("tau", t.tau);
  r.boolean("trainable_tau", t.trainable_tau);
  r.number("tau_min", t.tau_min);
  r.number("tau_max", t.tau_max);
  r.number("tau_eta", t.tau_eta);
  r.number("lambda", t.lambda);
  r.named("reg_kind", t.reg_kind, regularizer_from_string);
  r.named("init", t.init, init_kind_from_string);
  r.number("init_scale", t.init_scale);
  r.integer("pool_batches", t.pool_batches);
  r.boolean("fresh_sampling", t.fresh_sampling);
  r.named("similarity", t.similarity, similarity_from_string);
  r.number("fd_step", t.fd_step);
  r.boolean("early_stop", t.early_stop);
  r.integer("early_stop_window", t.early_stop_window);
  r.number("early_stop_tol", t.early_stop_tol);
  r.number("divergence_threshold", t.divergence_threshold);
}

void read_eval(const json& j, EvalConfig& e, std::vector<std::string>& problems) {
  FieldReader r(j, "eval", problems);
  r.integer("n_trials", e.n_trials);
  r.list("r_values", e.r_values);
  r.integer("eval_batch_size", e.eval_batch_size);
  r.integer("margin_batches", e.margin_batches);
  r.integer("histogram_bins", e.histogram_bins);
  r.integer("alpha_pairs", e.alpha_pairs);
  r.list("gamma_grid", e.gamma_grid);
  r.integer("variance_samples", e.variance_samples);
  r.list("thresholds", e.thresholds);
}

void read_params(const json& j, ExperimentParams& p, std::vector<std::string>& problems) {
  FieldReader r(j, "params", problems);
  r.list("temperatures", p.temperatures);
  r.number("reg_lambda", p.reg_lambda);
  r.optional_number("negative_lambda", p.negative_lambda);
  r.list("pool_sizes", p.pool_sizes);
  r.integer("repeats", p.repeats);
  r.integer("population_batches", p.population_batches);
  r.number("wstar_scale", p.wstar_scale);
  r.list("shift_factors", p.shift_factors);
  r.boolean("record_wall_time", p.record_wall_time);
}

std::string line_col(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i + 1 < byte; ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json j = {{"experiment", to_string(c.experiment)},
            {"seed", c.seed},
            {"model", model_json(c.model)},
            {"train", train_json(c.train)},
            {"eval", eval_json(c.eval)},
            {"params", params_json(c.params)}};
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  return j;
}

bool operator==(const TrainConfig& a, const TrainConfig& b) { return train_json(a) == train_json(b); }

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return to_json(a) == to_json(b);
}

std::vector<std::string> validate_config(const ExperimentConfig& c) {
  std::vector<std::string> problems;
  const auto bad = [&](const std::string& what) { problems.push_back(what); };

  const ModelSpec& m = c.model;
  bool model_ok = true;
  const auto model_bad = [&](const std::string& what) {
    bad(what);
    model_ok = false;
  };
  if (m.K < 2) model_bad("model.K: must be at least 2");
  if (m.K1 < m.K + 1) model_bad("model.K1: must be at least K + 1");
  if (!(m.gamma > 0.0 && m.gamma <= 1.0)) model_bad("model.gamma: must lie in (0, 1]");
  if (m.K2 < 1) model_bad("model.K2: must be at least 1");
  if (m.K3 < 1) model_bad("model.K3: must be at least 1");
  if (!(m.radius >= 0.0)) model_bad("model.radius: must be nonnegative");
  if (!m.probs.empty()) {
    double sum = 0.0;
    bool positive = true;
    for (double p : m.probs) {
      sum += p;
      positive = positive && p > 0.0;
    }
    if (static_cast<int>(m.probs.size()) != m.K) {
      model_bad("model.probs: needs exactly K entries");
    } else if (!positive || std::abs(sum - 1.0) > 1e-12) {
      model_bad("model.probs: must be positive and sum to 1");
    }
  }
  if (c.experiment == ExperimentId::E2_clip_vs_square) {
    if (m.family != ModelSpec::Family::counterexample) {
      model_bad("model.family: E2_clip_vs_square requires the counterexample family");
    }
    if (!(m.gamma < 1.0 / 3.0)) {
      model_bad("model.gamma: E2_clip_vs_square requires gamma < 1/3 (the square-loss "
                "counterexample needs a pair of latents with inner product above 2/3)");
    }
  }
  if (model_ok) {
    try {
      build_model(m);
    } catch (const Error& e) {
      bad(std::string("model: ") + e.what());
    }
  }

  try {
    c.train.validate();
  } catch (const ConfigError& e) {
    for (const auto& p : e.problems()) bad("train: " + p);
  }

  const EvalConfig& e = c.eval;
  if (e.n_trials < 1) bad("eval.n_trials: must be at least 1");
  if (e.r_values.empty()) bad("eval.r_values: must not be empty");
  for (int r : e.r_values) {
    if (r < 1 || r > m.K) {
      bad("eval.r_values: " + std::to_string(r) + " is outside [1, K]");
      break;
    }
  }
  if (e.eval_batch_size < 2) bad("eval.eval_batch_size: must be at least 2");
  if (e.margin_batches < 1) bad("eval.margin_batches: must be at least 1");
  if (e.histogram_bins < 1) bad("eval.histogram_bins: must be at least 1");
  if (e.alpha_pairs < 100) bad("eval.alpha_pairs: must be at least 100");
  if (e.variance_samples < 1) bad("eval.variance_samples: must be at least 1");
  for (double t : e.thresholds) {
    if (!(t >= 0.0)) {
      bad("eval.thresholds: must be nonnegative");
      break;
    }
  }

  const ExperimentParams& p = c.params;
  if (p.temperatures.empty()) bad("params.temperatures: must not be empty");
  for (double t : p.temperatures) {
    if (!(t > 0.0)) {
      bad("params.temperatures: must be positive");
      break;
    }
  }
  if (!(p.reg_lambda >= 0.0)) bad("params.reg_lambda: must be nonnegative");
  if (p.negative_lambda && !(*p.negative_lambda >= 0.0)) bad("params.negative_lambda: must be nonnegative");
  if (p.pool_sizes.empty()) bad("params.pool_sizes: must not be empty");
  for (int n : p.pool_sizes) {
    if (n < 1) {
      bad("params.pool_sizes: must be positive");
      break;
    }
  }
  if (p.repeats < 2) bad("params.repeats: must be at least 2");
  if (p.population_batches < 2) bad("params.population_batches: must be at least 2");
  if (!(p.wstar_scale >= 0.0)) bad("params.wstar_scale: must be nonnegative");
  if (p.shift_factors.empty()) bad("params.shift_factors: must not be empty");
  for (double f : p.shift_factors) {
    if (!(f >= 0.0)) {
      bad("params.shift_factors: must be nonnegative");
      break;
    }
  }
  if (c.experiment == ExperimentId::E3_regularization && c.train.batch_size < 2) {
    bad("train.batch_size: E3_regularization runs the negative-pair ablation, which needs B >= 2");
  }
  return problems;
}

ExperimentConfig parse_config(const std::string& text, std::optional<std::uint64_t> seed_override) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    std::string msg = e.what();
    // Drop nlohmann's "[json.exception.parse_error.101] parse error at line ..." prefix.
    const auto pos = msg.find(": ", msg.find("parse error"));
    if (pos != std::string::npos) msg = msg.substr(pos + 2);
    throw ConfigError({"syntax error at " + line_col(text, e.byte) + ": " + msg});
  }
  if (!j.is_object()) throw ConfigError({"config must be a JSON object"});

  std::vector<std::string> problems;
  ExperimentConfig c;
  {
    FieldReader r(j, "", problems);
    std::string name;
    if (!r.has("experiment")) {
      problems.emplace_back("experiment: required field missing");
    }
    r.string("experiment", name);
    if (!name.empty()) {
      if (auto id = experiment_from_string(name)) {
        c = default_config(*id);
      } else {
        problems.push_back("experiment: unknown experiment '" + name + "'");
      }
    }
    if (!r.has("seed") && !seed_override) problems.emplace_back("seed: required field missing");
    r.unsigned_integer("seed", c.seed);
    if (seed_override) c.seed = *seed_override;
    r.string("output_dir", c.output_dir);
    if (const json* m = r.object("model")) read_model(*m, c.model, problems);
    if (const json* t = r.object("train")) read_train(*t, c.train, problems);
    if (const json* e = r.object("eval")) read_eval(*e, c.eval, problems);
    if (const json* p = r.object("params")) read_params(*p, c.params, problems);
  }
  // Fields with type errors keep their defaults, so the semantic checks still
  // apply to everything else.
  for (auto& p : validate_config(c)) problems.push_back(std::move(p));
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config file '" + path + "'"});
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), seed_override);
}

void save_config(const std::string& path, const ExperimentConfig& config) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << to_json(config).dump(2) << '\n';
}

std::string config_hash(const ExperimentConfig& config) {
  // nlohmann::json keeps object keys sorted, so the dump is canonical.
  json j = to_json(config);
  j.erase("output_dir");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(j.dump());
  return os.str();
}

json to_json(const RunManifest& m) {
  return {{"config_hash", m.config_hash}, {"seed", m.seed},         {"version", m.version},
          {"started_at", m.started_at},   {"finished_at", m.finished_at}, {"files", m.files}};
}

// ---------------------------------------------------------------------------
// Running

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string label(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

// Tracks what a run writes so a failed run can be rolled back.
class OutputDir {
 public:
  explicit OutputDir(const std::string& dir) : root_(dir) {
    std::error_code ec;
    created_ = !fs::exists(root_);
    fs::create_directories(root_, ec);
    if (ec || !fs::is_directory(root_)) {
      throw IoError("cannot create output directory '" + dir + "'");
    }
    const fs::path probe = root_ / ".cliplab-write-test";
    std::ofstream(probe).put('x');
    if (!fs::exists(probe)) throw IoError("output directory '" + dir + "' is not writable");
    fs::remove(probe);
  }

  std::string path(const std::string& name) {
    const fs::path p = root_ / name;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    files_.push_back(name);
    return p.string();
  }

  void add(const std::string& name) { files_.push_back(name); }

  void write_json(const std::string& name, const json& j) {
    std::ofstream out(path(name));
    if (!out) throw IoError("cannot write '" + name + "'");
    out << j.dump(2) << '\n';
  }

  const std::vector<std::string>& files() const { return files_; }

  void roll_back() noexcept {
    std::error_code ec;
    for (const auto& f : files_) fs::remove(root_ / f, ec);
    fs::remove(root_ / "manifest.json", ec);
    if (created_) {
      fs::remove_all(root_, ec);
    } else {
      for (const auto& f : files_) {
        fs::path parent = (root_ / f).parent_path();
        while (parent != root_ && fs::is_empty(parent, ec)) {
          fs::remove(parent, ec);
          parent = parent.parent_path();
        }
      }
    }
  }

  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
  bool created_ = false;
  std::vector<std::string> files_;
};

void write_fraction_csv(const std::string& path, const std::map<double, double>& fractions) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "threshold,fraction\n" << std::setprecision(17);
  for (const auto& [th, f] : fractions) out << th << ',' << f << '\n';
}

json histogram_json(const Histogram& h) { return {{"edges", h.edges}, {"counts", h.counts}}; }

ZeroShotOptions zero_shot_options(const ExperimentConfig& c) {
  ZeroShotOptions o;
  o.n_trials = c.eval.n_trials;
  return o;
}

void run_e1(const ExperimentConfig& c, OutputDir& out, json& summary) {
  const GenerativeModel gen = build_model(c.model);
  const std::uint64_t train_seed = derive_seed(c.seed, "train");
  const std::uint64_t eval_seed = derive_seed(c.seed, "eval");
  const int B = c.eval.eval_batch_size;

  const auto record = [&](const std::string& name, const LinearScoreModel& model) {
    const auto margins = sampled_batch_margins(Scorer(model), gen, B, c.eval.margin_batches, eval_seed);
    write_margins_csv(out.path("margins_" + name + ".csv"), margins);
    json s;
    s["median_margin"] = median(margins);
    s["histogram"] = histogram_json(make_histogram(margins, c.eval.histogram_bins));
    return s;
  };

  json runs = json::array();
  for (double tau : c.params.temperatures) {
    TrainConfig tc = c.train;
    tc.tau = tau;
    const TrainResult res = train_gd(gen, tc, train_seed);
    write_trajectory_csv(out.path("trajectory_tau" + label(tau) + ".csv"), res.trajectory,
                         c.params.record_wall_time);
    json s = record("tau" + label(tau), res.model);
    s["tau"] = tau;
    s["eta"] = res.eta;
    s["iterations"] = res.trajectory.records.size();
    s["final_loss"] = res.trajectory.records.empty() ? 0.0 : res.trajectory.records.back().loss;
    runs.push_back(s);
  }
  TrainConfig init_cfg = c.train;
  init_cfg.tau = c.params.temperatures.front();
  const double init_eta = init_cfg.eta > 0.0 ? init_cfg.eta
                                             : default_learning_rate(gen, init_cfg.tau, init_cfg.lr_constant);
  const LinearScoreModel init(initial_weights(gen, init_cfg, init_eta, train_seed), init_cfg.tau);
  json init_summary = record("init", init);

  summary["runs"] = runs;
  summary["untrained"] = init_summary;
  // Smaller temperature => smaller median margin, all above the untrained model.
  bool ordered = true;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    ordered = ordered && runs[i]["median_margin"].get<double>() > init_summary["median_margin"].get<double>();
    for (std::size_t j = 0; j < runs.size(); ++j) {
      if (runs[i]["tau"].get<double>() < runs[j]["tau"].get<double>()) {
        ordered = ordered &&
                  runs[i]["median_margin"].get<double>() < runs[j]["median_margin"].get<double>();
      }
    }
  }
  summary["ordering_holds"] = ordered;
}

void run_e2(const ExperimentConfig& c, OutputDir& out, json& summary) {
  const GenerativeModel gen = build_model(c.model);
  const TrainResult clip = train_gd(gen, c.train, derive_seed(c.seed, "train"));
  write_trajectory_csv(out.path("trajectory_clip.csv"), clip.trajectory, c.params.record_wall_time);
  write_weights_binary(out.path("weights_clip.bin"), clip.model.W());

  const std::uint64_t eval_seed = derive_seed(c.seed, "eval");
  const ZeroShotOptions opts = zero_shot_options(c);
  json errors;
  for (SimilarityKind kind : {SimilarityKind::inner, SimilarityKind::cosine, SimilarityKind::negative_l2}) {
    const std::string sim = to_string(kind);
    const auto clip_err = zero_shot_errors(Scorer(LinearScoreModel(clip.model.W(), clip.model.tau(), kind)),
                                           gen, c.eval.r_values, opts, eval_seed);
    const auto sq_err = zero_shot_errors(Scorer::bayes(gen, kind), gen, c.eval.r_values, opts, eval_seed);
    write_zeroshot_csv(out.path("zeroshot_clip_" + sim + ".csv"), clip_err);
    write_zeroshot_csv(out.path("zeroshot_square_" + sim + ".csv"), sq_err);
    errors["clip"][sim] = {{"top1", clip_err.begin()->second.value}, {"se", clip_err.begin()->second.se}};
    errors["square"][sim] = {{"top1", sq_err.begin()->second.value}, {"se", sq_err.begin()->second.se}};
  }
  SampleStreams streams(derive_seed(c.seed, "square-loss"));
  const BayesSquareEncoder enc(gen);
  const double sq = square_loss([&](const Vector& x) { return enc(x); },
                                sample_batch(gen, 10000, streams)).value;
  summary["top_r_error"] = errors;
  summary["square_loss_of_bayes_encoder"] = sq;
  summary["square_loss_error_lower_bound"] = 1.0 / (3.0 * gen.K());
  summary["clip_final_loss"] = clip.trajectory.records.empty() ? 0.0 : clip.trajectory.records.back().loss;
}

void run_e3(const ExperimentConfig& c, OutputDir& out, json& summary) {
  const GenerativeModel gen = build_model(c.model);
  const double half_gamma = 0.5 * gen.latent().margin_gamma;
  std::vector<double> thresholds = c.eval.thresholds;
  if (std::find(thresholds.begin(), thresholds.end(), half_gamma) == thresholds.end()) {
    thresholds.push_back(half_gamma);
  }
  struct Run {
    std::string name;
    RegularizerKind kind;
    double lambda;
  };
  const std::vector<Run> runs = {
      {"unregularized", RegularizerKind::none, 0.0},
      {"positive", RegularizerKind::positive, c.params.reg_lambda},
      {"negative", RegularizerKind::negative,
       c.params.negative_lambda.value_or(default_negative_lambda(c.train.batch_size))},
  };
  const std::uint64_t train_seed = derive_seed(c.seed, "train");
  const std::uint64_t eval_seed = derive_seed(c.seed, "eval");
  json results;
  for (const auto& run : runs) {
    TrainConfig tc = c.train;
    tc.reg_kind = run.kind;
    tc.lambda = run.lambda;
    const TrainResult res = train_gd(gen, tc, train_seed);
    write_trajectory_csv(out.path("trajectory_" + run.name + ".csv"), res.trajectory,
                         c.params.record_wall_time);
    const Scorer scorer(res.model);
    const auto fractions = margin_of_correct_fraction(scorer, gen, thresholds, zero_shot_options(c), eval_seed);
    write_fraction_csv(out.path("margin_fraction_" + run.name + ".csv"), fractions);
    const auto margins = sampled_batch_margins(scorer, gen, c.eval.eval_batch_size, c.eval.margin_batches, eval_seed);
    write_margins_csv(out.path("margins_" + run.name + ".csv"), margins);
    results[run.name] = {{"lambda", run.lambda},
                         {"reg_kind", to_string(run.kind)},
                         {"eta", res.eta},
                         {"iterations", res.trajectory.records.size()},
                         {"fraction_at_half_gamma", fractions.at(half_gamma)},
                         {"median_margin", median(margins)}};
  }
  summary["half_gamma"] = half_gamma;
  summary["runs"] = results;
}

void run_e4(const ExperimentConfig& c, OutputDir& out, json& summary) {
  const GenerativeModel gen = build_model(c.model);
  const LinearScoreModel model(c.params.wstar_scale * completeness_weights(gen), c.train.tau,
                               c.train.similarity);
  const int B = c.train.batch_size;
  SampleStreams pop_streams(derive_seed(c.seed, "population"));
  const PopulationEstimate pop = population_loss_estimate(model, gen, B, c.params.population_batches, pop_streams);

  std::ofstream csv(out.path("concentration.csv"));
  csv << "n,rms_deviation,mean_abs_deviation,repeats\n" << std::setprecision(17);
  json rows = json::array();
  std::vector<double> rms_values;
  for (int n : c.params.pool_sizes) {
    std::vector<double> dev(static_cast<std::size_t>(c.params.repeats));
    const std::uint64_t base = derive_seed(derive_seed(c.seed, "pools"), static_cast<std::uint64_t>(n));
    parallel_blocks(c.params.repeats, [&](int rep) {
      SampleStreams streams(derive_seed(base, static_cast<std::uint64_t>(rep)));
      double total = 0.0;
      for (int k = 0; k < n; ++k) total += clip_batch_loss(model, sample_batch(gen, B, streams)).value;
      dev[static_cast<std::size_t>(rep)] = total / n - pop.mean;
    });
    double sq = 0.0;
    double ab = 0.0;
    for (double d : dev) {
      sq += d * d;
      ab += std::abs(d);
    }
    const double rms = std::sqrt(sq / dev.size());
    const double mad = ab / dev.size();
    rms_values.push_back(rms);
    csv << n << ',' << rms << ',' << mad << ',' << c.params.repeats << '\n';
    rows.push_back({{"n", n}, {"rms_deviation", rms}, {"mean_abs_deviation", mad}});
  }
  if (!csv) throw IoError("failed writing concentration.csv");
  summary["population_loss"] = {{"mean", pop.mean}, {"se", pop.standard_error}, {"n_batches", pop.n_batches}};
  summary["pool_sizes"] = rows;
  // Under 1/sqrt(n) scaling each ratio equals sqrt(n_next / n); "within a
  // factor of 2" accepts [expected / 2, expected * 2].
  json ratios = json::array();
  bool consistent = true;
  for (std::size_t i = 1; i < rms_values.size(); ++i) {
    const double ratio = rms_values[i - 1] / rms_values[i];
    const double expected = std::sqrt(static_cast<double>(c.params.pool_sizes[i]) / c.params.pool_sizes[i - 1]);
    consistent = consistent && ratio > 1.0 && ratio >= expected / 2.0 && ratio <= expected * 2.0;
    ratios.push_back({{"ratio", ratio}, {"expected", expected}});
  }
  summary["ratios"] = ratios;
  summary["consistent_with_inverse_sqrt"] = consistent;
}

void run_e5(const ExperimentConfig& c, OutputDir& out, json& summary) {
  const GenerativeModel gen = build_model(c.model);
  const TrainResult res = train_gd(gen, c.train, derive_seed(c.seed, "train"));
  write_trajectory_csv(out.path("trajectory.csv"), res.trajectory, c.params.record_wall_time);
  write_weights_binary(out.path("weights.bin"), res.model.W());
  const Scorer scorer(res.model);
  const std::uint64_t eval_seed = derive_seed(c.seed, "eval");

  std::ofstream csv(out.path("shift.csv"));
  csv << "shift,r,error,se\n" << std::setprecision(17);
  json curve = json::array();
  for (double f : c.params.shift_factors) {
    ZeroShotOptions o = zero_shot_options(c);
    o.prompt_sampler = gen.zeta_sampler().scaled(f);
    const auto errs = zero_shot_errors(scorer, gen, c.eval.r_values, o, eval_seed);
    for (const auto& [r, e] : errs) csv << f << ',' << r << ',' << e.value << ',' << e.se << '\n';
    curve.push_back({{"shift", f}, {"top1_error", errs.begin()->second.value}, {"se", errs.begin()->second.se}});
  }
  if (!csv) throw IoError("failed writing shift.csv");

  // Full in-distribution report for the trained model.
  EvalReport report;
  report.top_r_error = zero_shot_errors(scorer, gen, c.eval.r_values, zero_shot_options(c), eval_seed);
  report.margins = sampled_batch_margins(scorer, gen, c.eval.eval_batch_size, c.eval.margin_batches, eval_seed);
  report.margin_histogram = make_histogram(report.margins, c.eval.histogram_bins);
  report.alpha = alpha_curves(scorer, gen, c.eval.alpha_pairs,
                              c.eval.gamma_grid.empty() ? default_gamma_grid() : c.eval.gamma_grid, eval_seed);
  report.conditional_variance = conditional_variance(scorer, gen, c.eval.variance_samples, eval_seed);
  report.margin_of_correct_fraction =
      margin_of_correct_fraction(scorer, gen, c.eval.thresholds, zero_shot_options(c), eval_seed);
  for (const auto& f : write_eval_report((out.root() / "eval").string(), report)) out.add("eval/" + f);

  summary["shift_curve"] = curve;
  summary["eta"] = res.eta;
  summary["final_loss"] = res.trajectory.records.empty() ? 0.0 : res.trajectory.records.back().loss;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config) {
  if (auto problems = validate_config(config); !problems.empty()) throw ConfigError(std::move(problems));
  if (config.output_dir.empty()) throw ConfigError({"output_dir: no output directory given"});

  RunResult result;
  result.output_dir = config.output_dir;
  RunManifest& m = result.manifest;
  m.config_hash = config_hash(config);
  m.seed = config.seed;
  m.version = kVersion;
  m.started_at = utc_now();

  OutputDir out(config.output_dir);
  try {
    out.write_json("config.json", to_json(config));
    json& summary = result.summary;
    summary["experiment"] = to_string(config.experiment);
    summary["seed"] = config.seed;
    switch (config.experiment) {
      case ExperimentId::E1_temp_margin:
        run_e1(config, out, summary);
        break;
      case ExperimentId::E2_clip_vs_square:
        run_e2(config, out, summary);
        break;
      case ExperimentId::E3_regularization:
        run_e3(config, out, summary);
        break;
      case ExperimentId::E4_concentration:
        run_e4(config, out, summary);
        break;
      case ExperimentId::E5_shifted_prompts:
        run_e5(config, out, summary);
        break;
    }
    out.write_json("summary.json", summary);
    m.finished_at = utc_now();
    m.files = out.files();
    std::ofstream mf(out.root() / "manifest.json");
    if (!mf) throw IoError("cannot write manifest.json");
    mf << to_json(m).dump(2) << '\n';
  } catch (...) {
    out.roll_back();
    throw;
  }
  return result;
}

}  // namespace cliplab
