#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "hinfq/errors.hpp"
#include "hinfq/scenario.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_path, "Scenario config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", opts.out_dir, "Output directory (overrides config)");
  cmd->add_option("--seed", opts.seed, "RNG seed (overrides config)")
      ->each([&opts](const std::string&) { opts.seed_set = true; });
}

hinfq::scenario::ScenarioConfig load(const CommonOptions& opts) {
  auto config = hinfq::scenario::load_config(opts.config_path);
  if (!opts.out_dir.empty()) config.out_dir = opts.out_dir;
  if (opts.seed_set) config.seed = opts.seed;
  return config;
}

void print_report(const hinfq::scenario::RunReport& report) {
  std::printf("ok=%s converged=%s iterations=%lld wall=%.3fs\n",
              report.ok ? "true" : "false", report.converged ? "true" : "false",
              static_cast<long long>(report.iterations), report.wall_seconds);
  if (!report.message.empty()) std::printf("%s\n", report.message.c_str());
  for (const auto& file : report.manifest) std::printf("wrote %s\n", file.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model-free H-infinity Q-learning for linear plants, with a "
               "game-Riccati reference solver and a mobility-on-demand testbed"};
  app.require_subcommand(1);

  CommonOptions riccati_opts, learn_opts, amod_opts, bench_opts;
  std::string amod_sub;

  CLI::App* riccati = app.add_subcommand("solve-riccati", "Model-based fixed point and gains");
  add_common(riccati, riccati_opts);

  CLI::App* learn = app.add_subcommand("learn", "Online recursive least-squares run");
  add_common(learn, learn_opts);

  CLI::App* amod = app.add_subcommand("amod", "Network plant commands");
  amod->add_option("action", amod_sub, "build | rebalance | simulate")->required();
  add_common(amod, amod_opts);

  CLI::App* bench = app.add_subcommand("bench", "Per-update cost against batch re-solve");
  add_common(bench, bench_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    hinfq::scenario::RunReport report;
    if (riccati->parsed()) {
      report = hinfq::scenario::cmd_solve_riccati(load(riccati_opts));
    } else if (learn->parsed()) {
      report = hinfq::scenario::cmd_learn(load(learn_opts));
    } else if (amod->parsed()) {
      report = hinfq::scenario::cmd_amod(load(amod_opts), amod_sub);
    } else {
      report = hinfq::scenario::cmd_bench(load(bench_opts));
    }
    print_report(report);
    return report.ok ? 0 : 2;
  } catch (const hinfq::NumericError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
