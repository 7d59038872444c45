#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hinfq/amod.hpp"
#include "hinfq/qlearn.hpp"
#include "hinfq/system.hpp"

namespace hinfq::scenario {

enum class DisturbanceMode { kAdversarial, kExogenous };

// Parsed experiment description. A config names exactly one plant source;
// unknown keys anywhere in the document are rejected so a typo cannot
// silently fall back to a default.
struct ScenarioConfig {
  int schema = 1;

  std::optional<SystemDynamics> explicit_plant;
  std::optional<amod::NetworkSpec> network;

  double gamma = 0.0;
  std::optional<double> rho;
  std::optional<Eigen::MatrixXd> rx;
  std::optional<Eigen::MatrixXd> rv;

  double epsilon = 1e-6;
  Eigen::Index q = 0;  // 0: minimal batch
  std::optional<double> w_scalar;
  std::optional<Eigen::MatrixXd> w_matrix;
  Eigen::Index max_iter = 0;  // 0: 10x parameter count
  std::uint64_t seed = 0;
  double forgetting = 1.0;
  bool compare_oracle = false;
  std::optional<Eigen::MatrixXd> kv0;
  std::optional<Eigen::MatrixXd> kd0;
  // Network runs only: initial dispatch feedback serving this fraction of
  // each queue deviation during the excitation batch (0 = none). Any initial
  // policy is admissible; an open-loop batch lets queues wander far enough to
  // spread the regression scales badly.
  double init_dispatch_gain = 0.0;
  double state_norm_cap = 1e6;
  Eigen::Index loop_iterations = 0;  // > 0: run exactly this many updates

  DisturbanceMode mode = DisturbanceMode::kAdversarial;
  std::string replay_csv;

  std::vector<Dims> bench_dims;
  int bench_repetitions = 100;

  std::optional<double> fleet_size;
  std::string gains_csv;
  Eigen::Index horizon = 300;
  Eigen::Index metrics_window = 5;

  double riccati_tol = 1e-10;
  Eigen::Index riccati_max_iter = 10000;

  std::string out_dir = "out";
};

ScenarioConfig load_config(const std::string& path);
ScenarioConfig parse_config_text(const std::string& text);

struct RunReport {
  bool ok = false;         // the command completed its contract
  bool converged = false;
  Eigen::Index iterations = 0;
  double final_error = 0.0;  // NaN when not applicable
  double wall_seconds = 0.0;
  std::vector<std::string> manifest;  // files written, relative to out_dir
  std::string message;
};

RunReport cmd_solve_riccati(const ScenarioConfig& config);
RunReport cmd_learn(const ScenarioConfig& config);
RunReport cmd_amod(const ScenarioConfig& config, const std::string& subcommand);
RunReport cmd_bench(const ScenarioConfig& config);

// Gains as written by cmd_learn / read by `amod simulate`.
void write_gains_csv(const std::string& path, const PolicyPair& policies);
PolicyPair read_gains_csv(const std::string& path, const Dims& dims);

}  // namespace hinfq::scenario
