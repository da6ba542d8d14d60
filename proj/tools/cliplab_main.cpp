#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cliplab/errors.hpp"
#include "cliplab/experiments.hpp"
#include "cliplab/parallel.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

void print_problems(const cliplab::ConfigError& e) {
  std::cerr << "config error:\n";
  for (const auto& p : e.problems()) std::cerr << "  " << p << '\n';
}

int cmd_run(const std::string& path, std::optional<std::uint64_t> seed,
            const std::optional<std::string>& out, int threads) {
  cliplab::ExperimentConfig config = cliplab::load_config(path, seed);
  if (out) config.output_dir = *out;
  cliplab::set_default_threads(threads);
  std::cerr << "running " << cliplab::to_string(config.experiment) << " (seed " << config.seed
            << ", hash " << cliplab::config_hash(config) << ") into " << config.output_dir << '\n';
  const auto result = cliplab::run_experiment(config);
  std::cout << result.summary.dump(2) << '\n';
  std::cerr << "wrote " << result.manifest.files.size() << " files plus manifest.json\n";
  return kExitOk;
}

int cmd_validate(const std::string& path) {
  const auto config = cliplab::load_config(path);
  std::cout << "ok: " << cliplab::to_string(config.experiment) << " seed=" << config.seed
            << " hash=" << cliplab::config_hash(config) << '\n';
  return kExitOk;
}

int cmd_list() {
  for (const auto& info : cliplab::list_experiments())
    std::cout << cliplab::to_string(info.id) << "\t" << info.description << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cliplab: synthetic multi-modal contrastive learning experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cliplab::kVersion);

  std::string run_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int threads = 1;
  auto* run = app.add_subcommand("run", "run an experiment from a JSON config");
  run->add_option("config", run_path, "config file")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "override the config seed");
  run->add_option("--out", out, "output directory (overrides output_dir)");
  run->add_option("--threads", threads, "worker threads for Monte Carlo trials")
      ->check(CLI::PositiveNumber);

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "check a config and report every problem");
  validate->add_option("config", validate_path, "config file")->required();

  auto* list = app.add_subcommand("list-experiments", "print the available experiment ids");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*run) return cmd_run(run_path, seed, out, threads);
    if (*validate) return cmd_validate(validate_path);
    if (*list) return cmd_list();
  } catch (const cliplab::ConfigError& e) {
    print_problems(e);
    return kExitConfig;
  } catch (const cliplab::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
