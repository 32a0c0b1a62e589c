// fedsparse: run or tune federated sparse-training experiments from a JSON
// config.
//
//   fedsparse run configs/synth_regression.json --out results/
//   fedsparse search configs/search.json --threads 4

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedsparse/runner.hpp"

namespace {

int execute(bool search, const std::string& config_path, const std::optional<std::string>& out,
            const std::optional<std::uint64_t>& seed, const std::optional<std::size_t>& threads) {
  using namespace fedsparse;
  try {
    ExperimentConfig cfg = parse_config(config_path);
    if (seed) cfg.algorithm.seed = *seed;
    if (threads) {
      if (*threads == 0) throw ConfigError("--threads: must be at least 1");
      cfg.threads = *threads;
    }
    if (search && !cfg.search) cfg.search = SearchSpec{};
    const auto dir = resolve_output_dir(cfg, out);
    cfg.output_dir = dir.string();
    const RunSummary summary = search ? run_search(cfg, dir) : run_single(cfg, dir);

    for (const auto& v : summary.variants) {
      std::cout << variant_name(v.config.variant) << ": test_metric " << format_double(v.mean_test_metric)
                << " +- " << format_double(v.stderr_test_metric) << ", uplink_bits "
                << format_double(v.mean_uplink_bits);
      if (search) std::cout << ", gamma " << format_double(v.config.gamma) << ", p " << format_double(v.config.p);
      if (v.any_diverged) std::cout << " [diverged]";
      std::cout << "\n";
    }
    std::cout << "wrote " << (dir / "summary.json").string() << "\n";
    return summary.any_diverged() ? kExitDiverged : kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated sparse-training simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config_path, "JSON experiment config")->required();
    sub->add_option("--out", out, "Output directory (overrides " + std::string(fedsparse::kOutputDirEnv) +
                                      " and the config file)");
    sub->add_option("--seed", seed, "Algorithm seed (overrides the config file)");
    sub->add_option("--threads", threads, "Worker threads for independent runs");
  };
  CLI::App* run = app.add_subcommand("run", "Run every configured variant with repeats");
  CLI::App* search = app.add_subcommand("search", "Random search over step size and local steps");
  add_common(run);
  add_common(search);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? fedsparse::kExitOk : fedsparse::kExitConfig;
  }
  return execute(search->parsed(), config_path, out, seed, threads);
}
