#include "hinfq/scenario.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "hinfq/csv.hpp"
#include "hinfq/riccati.hpp"

namespace hinfq::scenario {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

[[noreturn]] void config_error(const std::string& what) {
  throw std::invalid_argument("config: " + what);
}

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& context) {
  if (!j.is_object()) config_error(context + " must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const auto& key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) config_error("unknown key \"" + item.key() + "\" in " + context);
  }
}

Eigen::MatrixXd parse_matrix(const json& j, const std::string& context) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) {
    config_error(context + " must be a 2-D array");
  }
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      config_error(context + " has ragged rows");
    }
    for (Eigen::Index k = 0; k < cols; ++k) {
      const auto& cell = row[static_cast<std::size_t>(k)];
      if (!cell.is_number()) config_error(context + " must contain numbers");
      m(i, k) = cell.get<double>();
    }
  }
  return m;
}

Eigen::VectorXd parse_vector(const json& j, const std::string& context) {
  if (!j.is_array()) config_error(context + " must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto& cell = j[static_cast<std::size_t>(i)];
    if (!cell.is_number()) config_error(context + " must contain numbers");
    v[i] = cell.get<double>();
  }
  return v;
}

void parse_plant(const json& j, ScenarioConfig& config) {
  check_keys(j, {"type", "A", "B", "L", "stations", "travel_times", "arrival_rates",
                 "rate_schedule"},
             "plant");
  const std::string type = j.value("type", "");
  if (type == "explicit") {
    if (!j.contains("A") || !j.contains("B") || !j.contains("L")) {
      config_error("explicit plant needs A, B and L");
    }
    config.explicit_plant.emplace(parse_matrix(j["A"], "plant.A"),
                                  parse_matrix(j["B"], "plant.B"),
                                  parse_matrix(j["L"], "plant.L"));
  } else if (type == "network") {
    if (!j.contains("stations") || !j.contains("travel_times") || !j.contains("arrival_rates")) {
      config_error("network plant needs stations, travel_times and arrival_rates");
    }
    std::vector<amod::RatePhase> schedule;
    if (j.contains("rate_schedule")) {
      if (!j["rate_schedule"].is_array()) config_error("plant.rate_schedule must be an array");
      for (const auto& entry : j["rate_schedule"]) {
        check_keys(entry, {"start_iteration", "rates"}, "plant.rate_schedule[]");
        if (!entry.contains("start_iteration") || !entry.contains("rates")) {
          config_error("rate_schedule entries need start_iteration and rates");
        }
        schedule.push_back(amod::RatePhase{entry["start_iteration"].get<Eigen::Index>(),
                                           parse_vector(entry["rates"], "rate_schedule.rates")});
      }
    }
    config.network.emplace(j["stations"].get<Eigen::Index>(),
                           parse_vector(j["travel_times"], "plant.travel_times"),
                           parse_vector(j["arrival_rates"], "plant.arrival_rates"),
                           std::move(schedule));
  } else {
    config_error("plant.type must be \"explicit\" or \"network\"");
  }
}

void parse_cost(const json& j, ScenarioConfig& config) {
  check_keys(j, {"gamma", "rho", "R_x", "R_v"}, "cost");
  if (!j.contains("gamma")) config_error("cost.gamma is required");
  config.gamma = j["gamma"].get<double>();
  if (!(config.gamma > 0.0)) config_error("cost.gamma must be positive");
  if (j.contains("rho")) config.rho = j["rho"].get<double>();
  if (j.contains("R_x")) config.rx = parse_matrix(j["R_x"], "cost.R_x");
  if (j.contains("R_v")) config.rv = parse_matrix(j["R_v"], "cost.R_v");
}

void parse_learner(const json& j, ScenarioConfig& config) {
  check_keys(j, {"epsilon", "q", "W_lambda", "max_iter", "seed", "forgetting", "compare_oracle",
                 "K_v0", "K_d0", "init_dispatch_gain", "state_norm_cap", "loop_iterations"},
             "learner");
  if (j.contains("epsilon")) config.epsilon = j["epsilon"].get<double>();
  if (!(config.epsilon > 0.0)) config_error("learner.epsilon must be positive");
  if (j.contains("q")) config.q = j["q"].get<Eigen::Index>();
  if (j.contains("W_lambda")) {
    if (j["W_lambda"].is_number()) {
      config.w_scalar = j["W_lambda"].get<double>();
    } else {
      config.w_matrix = parse_matrix(j["W_lambda"], "learner.W_lambda");
    }
  }
  if (j.contains("max_iter")) config.max_iter = j["max_iter"].get<Eigen::Index>();
  if (j.contains("seed")) config.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("forgetting")) config.forgetting = j["forgetting"].get<double>();
  if (j.contains("compare_oracle")) config.compare_oracle = j["compare_oracle"].get<bool>();
  if (j.contains("K_v0")) config.kv0 = parse_matrix(j["K_v0"], "learner.K_v0");
  if (j.contains("K_d0")) config.kd0 = parse_matrix(j["K_d0"], "learner.K_d0");
  if (j.contains("init_dispatch_gain")) {
    config.init_dispatch_gain = j["init_dispatch_gain"].get<double>();
  }
  if (j.contains("state_norm_cap")) config.state_norm_cap = j["state_norm_cap"].get<double>();
  if (j.contains("loop_iterations")) config.loop_iterations = j["loop_iterations"].get<Eigen::Index>();
}

void parse_disturbance(const json& j, ScenarioConfig& config) {
  check_keys(j, {"mode", "replay_csv"}, "disturbance");
  const std::string mode = j.value("mode", "adversarial");
  if (mode == "adversarial") {
    config.mode = DisturbanceMode::kAdversarial;
  } else if (mode == "exogenous") {
    config.mode = DisturbanceMode::kExogenous;
  } else {
    config_error("disturbance.mode must be \"adversarial\" or \"exogenous\"");
  }
  if (j.contains("replay_csv")) config.replay_csv = j["replay_csv"].get<std::string>();
}

void parse_bench(const json& j, ScenarioConfig& config) {
  check_keys(j, {"dims", "repetitions"}, "bench");
  if (j.contains("dims")) {
    if (!j["dims"].is_array()) config_error("bench.dims must be an array of [m1, m2, m3]");
    for (const auto& entry : j["dims"]) {
      if (!entry.is_array() || entry.size() != 3) config_error("bench.dims entries must be [m1, m2, m3]");
      config.bench_dims.push_back(Dims{entry[0].get<Eigen::Index>(), entry[1].get<Eigen::Index>(),
                                       entry[2].get<Eigen::Index>()});
    }
  }
  if (j.contains("repetitions")) config.bench_repetitions = j["repetitions"].get<int>();
}

void parse_amod(const json& j, ScenarioConfig& config) {
  check_keys(j, {"fleet_size", "gains_csv", "horizon", "metrics_window"}, "amod");
  if (j.contains("fleet_size")) config.fleet_size = j["fleet_size"].get<double>();
  if (j.contains("gains_csv")) config.gains_csv = j["gains_csv"].get<std::string>();
  if (j.contains("horizon")) config.horizon = j["horizon"].get<Eigen::Index>();
  if (j.contains("metrics_window")) config.metrics_window = j["metrics_window"].get<Eigen::Index>();
}

void parse_riccati(const json& j, ScenarioConfig& config) {
  check_keys(j, {"tol", "max_iter"}, "riccati");
  if (j.contains("tol")) config.riccati_tol = j["tol"].get<double>();
  if (j.contains("max_iter")) config.riccati_max_iter = j["max_iter"].get<Eigen::Index>();
}

}  // namespace

ScenarioConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    config_error(std::string("invalid JSON: ") + e.what());
  }
  check_keys(j, {"schema", "plant", "cost", "learner", "disturbance", "bench", "amod", "riccati",
                 "output_dir"},
             "document");
  if (!j.contains("schema") || !j["schema"].is_number_integer() || j["schema"].get<int>() != 1) {
    config_error("schema must be the integer 1");
  }
  ScenarioConfig config;
  if (j.contains("plant")) parse_plant(j["plant"], config);
  if (j.contains("cost")) parse_cost(j["cost"], config);
  if (j.contains("learner")) parse_learner(j["learner"], config);
  if (j.contains("disturbance")) parse_disturbance(j["disturbance"], config);
  if (j.contains("bench")) parse_bench(j["bench"], config);
  if (j.contains("amod")) parse_amod(j["amod"], config);
  if (j.contains("riccati")) parse_riccati(j["riccati"], config);
  if (j.contains("output_dir")) config.out_dir = j["output_dir"].get<std::string>();
  if (config.explicit_plant && config.network) config_error("exactly one plant source allowed");
  return config;
}

ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

namespace {

struct ResolvedPlant {
  SystemDynamics dyn;
  CostSpec cost;
  std::optional<amod::AmodPlant> amod_plant;
};

CostSpec cost_for(const ScenarioConfig& config, const std::optional<amod::NetworkSpec>& network,
                  double gamma) {
  if (config.rx && config.rv) return CostSpec(*config.rx, *config.rv, gamma);
  if (network && config.rho) {
    return amod::cost_from_network(*network, *config.rho, gamma);
  }
  config_error("cost needs either R_x and R_v, or rho with a network plant");
}

ResolvedPlant resolve_plant(const ScenarioConfig& config) {
  if (!(config.gamma > 0.0)) config_error("cost.gamma is required");
  if (config.explicit_plant) {
    if (!config.rx || !config.rv) config_error("explicit plant needs cost.R_x and cost.R_v");
    return ResolvedPlant{*config.explicit_plant,
                         CostSpec(*config.rx, *config.rv, config.gamma), std::nullopt};
  }
  if (config.network) {
    amod::AmodPlant plant = amod::build_dynamics(*config.network);
    CostSpec cost = cost_for(config, config.network, config.gamma);
    SystemDynamics dyn = plant.dynamics;
    return ResolvedPlant{std::move(dyn), std::move(cost), std::move(plant)};
  }
  config_error("a plant source is required");
}

void write_report_json(const ScenarioConfig& config, const RunReport& report) {
  json j;
  j["ok"] = report.ok;
  j["converged"] = report.converged;
  j["iterations"] = report.iterations;
  if (std::isnan(report.final_error)) {
    j["final_error"] = nullptr;
  } else {
    j["final_error"] = report.final_error;
  }
  j["wall_seconds"] = report.wall_seconds;
  j["manifest"] = report.manifest;
  j["message"] = report.message;
  std::ofstream out(fs::path(config.out_dir) / "report.json");
  out << j.dump(2) << '\n';
}

csv::Table trace_table(const LearningTrace& trace) {
  csv::Table table;
  table.header = {"iteration", "s_delta_norm", "kv_norm", "kd_norm", "p_err_norm",
                  "update_seconds"};
  for (const TraceRow& row : trace.rows) {
    table.rows.push_back({csv::format_index(row.iteration), csv::format_double(row.s_delta_norm),
                          csv::format_double(row.kv_norm), csv::format_double(row.kd_norm),
                          csv::format_double(row.p_err_norm),
                          csv::format_double(row.update_seconds)});
  }
  return table;
}

// Per-link Poisson rates present in a replay file, keyed by iteration.
std::vector<Eigen::VectorXd> load_replay(const std::string& path, Eigen::Index n,
                                         Eigen::Index m3) {
  const csv::Table table = csv::read_table(path);
  const Eigen::Index it_col = table.column("iteration");
  const Eigen::Index o_col = table.column("origin");
  const Eigen::Index d_col = table.column("dest");
  const Eigen::Index c_col = table.column("count");
  if (it_col < 0 || o_col < 0 || d_col < 0 || c_col < 0) {
    throw std::invalid_argument("replay: header must be iteration,origin,dest,count");
  }
  Eigen::Index max_iter = -1;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    max_iter = std::max(max_iter, static_cast<Eigen::Index>(table.value(r, it_col)));
  }
  std::vector<Eigen::VectorXd> rows(static_cast<std::size_t>(max_iter + 1),
                                    Eigen::VectorXd::Zero(m3));
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto it = static_cast<Eigen::Index>(table.value(r, it_col));
    const auto origin = static_cast<Eigen::Index>(table.value(r, o_col));
    const auto dest = static_cast<Eigen::Index>(table.value(r, d_col));
    const Eigen::Index link = amod::NetworkSpec::link_index(n, origin, dest);
    rows[static_cast<std::size_t>(it)][link] = table.value(r, c_col);
  }
  return rows;
}

void write_demand_csv(const fs::path& path, const Trajectory& traj, Eigen::Index n) {
  csv::Table table;
  table.header = {"iteration", "origin", "dest", "count"};
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const Eigen::VectorXd& d = traj.steps[t].d;
    for (Eigen::Index l = 0; l < d.size(); ++l) {
      if (d[l] == 0.0) continue;
      const auto [origin, dest] = amod::NetworkSpec::link_nodes(n, l);
      table.rows.push_back({std::to_string(t), csv::format_index(origin),
                            csv::format_index(dest), csv::format_double(d[l])});
    }
  }
  csv::write_table(path, table);
}

void write_metrics_csv(const fs::path& path, const std::vector<amod::MetricsRow>& rows) {
  csv::Table table;
  table.header = {"window_start", "avg_queue", "avg_carrying", "avg_rebalancing",
                  "negative_state_entries", "negative_control_entries"};
  for (const auto& row : rows) {
    table.rows.push_back({csv::format_index(row.window_start), csv::format_double(row.avg_queue),
                          csv::format_double(row.avg_carrying),
                          csv::format_double(row.avg_rebalancing),
                          csv::format_index(row.negative_state_entries),
                          csv::format_index(row.negative_control_entries)});
  }
  csv::write_table(path, table);
}

// Probe covariances for both input channels from the configured W_lambda.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> probe_covariances(const ScenarioConfig& config,
                                                              const Dims& dims) {
  if (config.w_matrix) {
    if (config.w_matrix->rows() != dims.m2) {
      config_error("learner.W_lambda matrix order must equal the control dimension");
    }
    return {*config.w_matrix, Eigen::MatrixXd()};
  }
  const double w = config.w_scalar.value_or(0.01);
  return {w * Eigen::MatrixXd::Identity(dims.m2, dims.m2),
          w * Eigen::MatrixXd::Identity(dims.m3, dims.m3)};
}

LearnConfig base_learn_config(const ScenarioConfig& config, const Dims& dims) {
  LearnConfig lc;
  auto [wv, wd] = probe_covariances(config, dims);
  lc.noise_cov_v = std::move(wv);
  lc.noise_cov_d = std::move(wd);
  lc.q = config.q;
  lc.epsilon = config.epsilon;
  lc.max_iter = config.max_iter;
  lc.seed = config.seed;
  lc.forgetting = config.forgetting;
  lc.fixed_iterations = config.loop_iterations;
  if (config.kv0 || config.kd0) {
    PolicyPair p0 = PolicyPair::zero(dims);
    if (config.kv0) p0.Kv = *config.kv0;
    if (config.kd0) p0.Kd = *config.kd0;
    lc.initial_policies = std::move(p0);
  }
  return lc;
}

}  // namespace

void write_gains_csv(const std::string& path, const PolicyPair& policies) {
  csv::Table table;
  table.header = {"matrix", "row", "col", "value"};
  auto emit = [&table](const char* name, const Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        table.rows.push_back({name, csv::format_index(i), csv::format_index(j),
                              csv::format_double(m(i, j))});
      }
    }
  };
  emit("K_v", policies.Kv);
  emit("K_d", policies.Kd);
  csv::write_table(path, table);
}

PolicyPair read_gains_csv(const std::string& path, const Dims& dims) {
  const csv::Table table = csv::read_table(path);
  const Eigen::Index m_col = table.column("matrix");
  const Eigen::Index r_col = table.column("row");
  const Eigen::Index c_col = table.column("col");
  const Eigen::Index v_col = table.column("value");
  if (m_col < 0 || r_col < 0 || c_col < 0 || v_col < 0) {
    throw std::invalid_argument("gains: header must be matrix,row,col,value");
  }
  PolicyPair policies = PolicyPair::zero(dims);
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const std::string& which = table.rows[r][static_cast<std::size_t>(m_col)];
    const auto i = static_cast<Eigen::Index>(table.value(r, r_col));
    const auto j = static_cast<Eigen::Index>(table.value(r, c_col));
    const double value = table.value(r, v_col);
    if (which == "K_v") {
      policies.Kv(i, j) = value;
    } else if (which == "K_d") {
      policies.Kd(i, j) = value;
    } else {
      throw std::invalid_argument("gains: unknown matrix name " + which);
    }
  }
  return policies;
}

RunReport cmd_solve_riccati(const ScenarioConfig& config) {
  const auto t0 = Clock::now();
  ResolvedPlant plant = resolve_plant(config);
  fs::create_directories(config.out_dir);

  RiccatiSolution solution = [&] {
    try {
      return solve_riccati(plant.dyn, plant.cost, config.riccati_tol, config.riccati_max_iter);
    } catch (const GammaTooSmall& e) {
      // Doubling search for the first workable attenuation level, purely as a
      // hint for the user; the run itself still fails.
      double candidate = config.gamma;
      std::string hint = "; no feasible gamma found within 40 doublings";
      for (int k = 0; k < 40; ++k) {
        candidate *= 2.0;
        try {
          CostSpec retry = config.rx && config.rv
                               ? CostSpec(*config.rx, *config.rv, candidate)
                               : amod::cost_from_network(*config.network, *config.rho, candidate);
          (void)solve_riccati(plant.dyn, retry, config.riccati_tol, config.riccati_max_iter);
          hint = "; doubling search suggests gamma >= " + csv::format_double(candidate);
          break;
        } catch (const NumericError&) {
        }
      }
      throw GammaTooSmall(e.what() + hint);
    }
  }();

  csv::write_matrix(fs::path(config.out_dir) / "p_star.csv", solution.P_star.P);
  csv::write_matrix(fs::path(config.out_dir) / "s_star.csv", solution.S_star.S());
  write_gains_csv((fs::path(config.out_dir) / "gains.csv").string(), solution.policies);

  RunReport report;
  report.ok = true;
  report.converged = true;
  report.iterations = solution.iterations;
  report.final_error = solution.residual;
  report.wall_seconds = seconds_since(t0);
  report.manifest = {"p_star.csv", "s_star.csv", "gains.csv"};
  report.message = "fixed point after " + std::to_string(solution.iterations) +
                   " sweeps, residual " + csv::format_double(solution.residual);
  write_report_json(config, report);
  return report;
}

namespace {

// Learning environment over the network plant in equilibrium-shifted
// coordinates, with exogenous demand and an original-coordinate log.
class AmodLearnEnv final : public Environment {
 public:
  AmodLearnEnv(const amod::AmodPlant& plant, amod::CoordinateShift shift,
               std::function<Eigen::VectorXd()> demand, const Eigen::VectorXd& x0_original)
      : plant_(plant), shift_(std::move(shift)), demand_(std::move(demand)) {
    x_shifted_ = x0_original - shift_.x_bar;
  }

  Dims dims() const override { return plant_.dynamics.dims(); }
  const Eigen::VectorXd& state() const override { return x_shifted_; }
  bool disturbance_selectable() const override { return false; }

  Transition step(const Eigen::VectorXd& v_shifted, const Eigen::VectorXd&) override {
    const Eigen::VectorXd d_original = demand_();
    Eigen::VectorXd d_shifted = d_original - shift_.d_bar;
    Eigen::VectorXd x_next = hinfq::step(plant_.dynamics, x_shifted_, v_shifted, d_shifted);
    if (!x_next.allFinite() || x_next.cwiseAbs().maxCoeff() > kDivergenceLimit) {
      throw DivergenceError("amod learning: state diverged at step " + std::to_string(steps_),
                            steps_);
    }
    original_.steps.push_back(Transition{x_shifted_ + shift_.x_bar, v_shifted + shift_.v_bar,
                                         d_original, x_next + shift_.x_bar});
    Transition tr{x_shifted_, v_shifted, std::move(d_shifted), x_next};
    x_shifted_ = std::move(x_next);
    ++steps_;
    return tr;
  }

  // Re-express the state against a new equilibrium; the plant matrices are
  // shift invariant so learning state carries over untouched.
  void set_shift(const amod::CoordinateShift& shift) {
    x_shifted_ = (x_shifted_ + shift_.x_bar) - shift.x_bar;
    shift_ = shift;
  }

  const Trajectory& original_trajectory() const { return original_; }

 private:
  const amod::AmodPlant& plant_;
  amod::CoordinateShift shift_;
  std::function<Eigen::VectorXd()> demand_;
  Eigen::VectorXd x_shifted_;
  Trajectory original_;
  long steps_ = 0;
};

struct PhaseSetup {
  Eigen::VectorXd rates;
  amod::Equilibrium eq;
  amod::CoordinateShift shift;
  CostSpec cost;
  std::optional<Eigen::MatrixXd> oracle_P;
  Eigen::MatrixXd oracle_S;  // empty unless oracle requested
};

PhaseSetup make_phase(const ScenarioConfig& config, const amod::NetworkSpec& base,
                      const amod::AmodPlant& plant, const Eigen::VectorXd& rates) {
  // Unit idle slack per station; the simulated fleet deliberately differs
  // (see learn_amod_exogenous), which keeps the conserved fleet functional
  // nonzero in shifted coordinates and the init regression full rank.
  amod::NetworkSpec spec(base.n, base.travel_times, rates);
  PhaseSetup phase{rates,
                  amod::equilibrium(spec, amod::solve_rebalancing(spec).R_star),
                  amod::CoordinateShift{},
                  amod::cost_from_network(rates, base.travel_times, base.n,
                                          config.rho.value_or(0.05), config.gamma),
                  std::nullopt,
                  Eigen::MatrixXd()};
  phase.shift = amod::make_shift(plant, phase.eq, rates);
  if (config.compare_oracle) {
    RiccatiSolution sol =
        solve_riccati(plant.dynamics, phase.cost, config.riccati_tol, config.riccati_max_iter);
    phase.oracle_P = sol.P_star.P;
    phase.oracle_S = sol.S_star.S();
  }
  return phase;
}

RunReport learn_amod_exogenous(const ScenarioConfig& config, const amod::AmodPlant& plant,
                               Clock::time_point t0) {
  const amod::NetworkSpec& network = *config.network;
  const Dims dims = plant.dynamics.dims();

  std::vector<amod::RatePhase> phases = network.rate_schedule;
  if (phases.empty()) phases.push_back(amod::RatePhase{0, network.arrival_rates});

  // Simulated fleet: covers the worst-phase lower bound with two idle
  // vehicles per station. The per-phase equilibria use unit idle slack, so
  // the conserved fleet total sits off every equilibrium total; with a zero
  // offset the shifted samples would lie on a homogeneous hyperplane and the
  // quadratic regression would lose exactly one linear functional's worth of
  // rank (33 feature directions at n=3).
  double fleet = 0.0;
  if (config.fleet_size) {
    fleet = *config.fleet_size;
  } else {
    for (const auto& phase : phases) {
      amod::NetworkSpec spec(network.n, network.travel_times, phase.rates);
      const auto reb = amod::solve_rebalancing(spec);
      fleet = std::max(fleet, network.travel_times.dot(phase.rates + reb.R_star));
    }
    fleet += 2.0 * static_cast<double>(network.n);
  }

  PhaseSetup phase = make_phase(config, network, plant, phases.front().rates);

  // Initial condition: empty queues and links, the whole fleet parked evenly.
  const Eigen::VectorXd x0 = plant.pack_state(
      Eigen::VectorXd::Zero(plant.links()),
      Eigen::VectorXd::Constant(network.n, fleet / static_cast<double>(network.n)),
      Eigen::VectorXd::Zero(plant.links()));

  std::vector<Eigen::VectorXd> replay_rows;
  std::optional<amod::PoissonDemand> poisson;
  long demand_step = 0;
  std::function<Eigen::VectorXd()> demand;
  if (!config.replay_csv.empty()) {
    replay_rows = load_replay(config.replay_csv, network.n, dims.m3);
    demand = [&replay_rows, &demand_step, &dims]() {
      const auto idx = static_cast<std::size_t>(demand_step++);
      return idx < replay_rows.size() ? replay_rows[idx] : Eigen::VectorXd::Zero(dims.m3);
    };
  } else {
    poisson.emplace(phase.rates, config.seed + 1);
    demand = [&poisson]() { return (*poisson)(); };
  }

  AmodLearnEnv env(plant, phase.shift, demand, x0);

  LearnConfig lc = base_learn_config(config, dims);
  const Eigen::Index q = lc.q > 0 ? lc.q : dims.critic_params();
  PolicyPair policies0 = lc.initial_policies ? *lc.initial_policies : PolicyPair::zero(dims);
  if (!lc.initial_policies && config.init_dispatch_gain != 0.0) {
    // Dispatch a fraction of each queue deviation during excitation.
    for (Eigen::Index l = 0; l < plant.links(); ++l) {
      policies0.Kv(plant.u_offset() + l, plant.w_offset() + l) = config.init_dispatch_gain;
    }
  }

  RunReport report;
  LearningTrace trace;
  LearnResult result;
  result.env_steps = 0;

  const double nan = kNaN;
  auto p_err = [&](const CriticState& st) {
    if (!phase.oracle_P) return nan;
    return (st.value_kernel().P - *phase.oracle_P).norm();
  };

  CriticState st;
  bool have_critic = false;
  try {
    InitBatch batch = collect_init(env, policies0, lc.noise_cov_v, lc.noise_cov_d, q, lc.seed);
    st = init_solve(batch, phase.cost, Eigen::VectorXd::Zero(dims.critic_params()), policies0);
    st.forgetting = lc.forgetting;
    have_critic = true;
    result.env_steps = q;
    trace.rows.push_back(TraceRow{st.iteration,
                                  spectral_norm_sym(unvecs(st.s, dims.nz())),
                                  st.policies.Kv.norm(), st.policies.Kd.norm(), p_err(st), 0.0});

    const Eigen::Index budget = config.loop_iterations > 0
                                    ? config.loop_iterations
                                    : (lc.max_iter > 0 ? lc.max_iter : 10 * dims.critic_params());
    std::size_t phase_idx = 0;
    for (Eigen::Index k = 0; k < budget; ++k) {
      if (phase_idx + 1 < phases.size() && phases[phase_idx + 1].start_iteration <= k) {
        ++phase_idx;
        phase = make_phase(config, network, plant, phases[phase_idx].rates);
        env.set_shift(phase.shift);
        if (poisson) poisson->set_rates(phase.rates);
        st.xi = vecs(g_matrix(phase.cost, dims).S());
      }
      const Eigen::VectorXd x = env.state();
      Transition tr = env.step(st.policies.Kv * x, Eigen::VectorXd::Zero(dims.m3));
      const Eigen::VectorXd s_prev = st.s;
      const auto u0 = Clock::now();
      st = rls_update(std::move(st), tr);
      const double update_seconds = seconds_since(u0);
      ++result.env_steps;
      const double s_delta = spectral_norm_sym(unvecs(st.s - s_prev, dims.nz()));
      trace.rows.push_back(TraceRow{st.iteration, s_delta, st.policies.Kv.norm(),
                                    st.policies.Kd.norm(), p_err(st), update_seconds});
      if (config.loop_iterations == 0 && s_delta <= config.epsilon) {
        result.converged = true;
        break;
      }
    }
    if (config.loop_iterations > 0) {
      result.converged =
          !trace.rows.empty() && trace.rows.back().s_delta_norm <= config.epsilon;
    } else if (!result.converged) {
      result.error = "learn: kernel change still above epsilon at the iteration budget";
      result.numeric_failure = true;
    }
  } catch (const NumericError& e) {
    result.error = e.what();
    result.numeric_failure = true;
  }

  fs::create_directories(config.out_dir);
  csv::write_table(fs::path(config.out_dir) / "trace.csv", trace_table(trace));
  report.manifest = {"trace.csv"};
  if (have_critic) {
    csv::write_matrix(fs::path(config.out_dir) / "final_s.csv", unvecs(st.s, dims.nz()));
    write_gains_csv((fs::path(config.out_dir) / "final_gains.csv").string(), st.policies);
    report.manifest.push_back("final_s.csv");
    report.manifest.push_back("final_gains.csv");
    if (phase.oracle_P) {
      report.final_error =
          (unvecs(st.s, dims.nz()) - phase.oracle_S).norm() / phase.oracle_S.norm();
    } else {
      report.final_error = nan;
    }
  } else {
    report.final_error = nan;
  }
  write_metrics_csv(fs::path(config.out_dir) / "metrics.csv",
                    amod::metrics(env.original_trajectory(), plant, config.metrics_window));
  write_demand_csv(fs::path(config.out_dir) / "demand.csv", env.original_trajectory(),
                   network.n);
  report.manifest.push_back("metrics.csv");
  report.manifest.push_back("demand.csv");

  report.converged = result.converged;
  report.iterations = result.env_steps;
  report.ok = !result.numeric_failure;
  report.message = result.error;
  report.wall_seconds = seconds_since(t0);
  write_report_json(config, report);
  return report;
}

}  // namespace

RunReport cmd_learn(const ScenarioConfig& config) {
  const auto t0 = Clock::now();
  ResolvedPlant plant = resolve_plant(config);
  fs::create_directories(config.out_dir);

  if (config.network && config.mode == DisturbanceMode::kExogenous) {
    return learn_amod_exogenous(config, *plant.amod_plant, t0);
  }

  const Dims dims = plant.dyn.dims();
  LearnConfig lc = base_learn_config(config, dims);

  Eigen::MatrixXd oracle_S;
  if (config.compare_oracle) {
    RiccatiSolution sol =
        solve_riccati(plant.dyn, plant.cost, config.riccati_tol, config.riccati_max_iter);
    lc.reference_P = sol.P_star.P;
    oracle_S = sol.S_star.S();
  }

  std::vector<Eigen::VectorXd> replay_rows;
  std::optional<SimEnv> env;
  Eigen::VectorXd x0 = Eigen::VectorXd::Ones(dims.m1);
  if (config.mode == DisturbanceMode::kExogenous) {
    if (config.replay_csv.empty()) {
      config_error("exogenous mode with an explicit plant needs disturbance.replay_csv");
    }
    // Replay rows are keyed by origin/destination of a complete digraph whose
    // link count matches m3.
    Eigen::Index n_nodes = 2;
    while (n_nodes * (n_nodes - 1) < dims.m3) ++n_nodes;
    if (n_nodes * (n_nodes - 1) != dims.m3) {
      config_error("replay requires m3 to be a complete-digraph link count");
    }
    replay_rows = load_replay(config.replay_csv, n_nodes, dims.m3);
    DisturbanceFn fn = [rows = std::move(replay_rows), m3 = dims.m3](Eigen::Index t) {
      const auto idx = static_cast<std::size_t>(t);
      return idx < rows.size() ? rows[idx] : Eigen::VectorXd(Eigen::VectorXd::Zero(m3));
    };
    env.emplace(plant.dyn, x0, std::move(fn));
  } else {
    env.emplace(plant.dyn, x0);
  }
  env->set_state_norm_cap(config.state_norm_cap);

  LearnResult result = learn_online(*env, plant.cost, lc);

  csv::write_table(fs::path(config.out_dir) / "trace.csv", trace_table(result.trace));
  RunReport report;
  report.manifest = {"trace.csv"};
  report.final_error = kNaN;
  if (result.critic) {
    const Eigen::MatrixXd s_final = unvecs(result.critic->s, dims.nz());
    csv::write_matrix(fs::path(config.out_dir) / "final_s.csv", s_final);
    write_gains_csv((fs::path(config.out_dir) / "final_gains.csv").string(),
                    result.critic->policies);
    report.manifest.push_back("final_s.csv");
    report.manifest.push_back("final_gains.csv");
    if (oracle_S.size()) report.final_error = (s_final - oracle_S).norm() / oracle_S.norm();
  }

  report.converged = result.converged;
  report.iterations = result.env_steps;
  report.ok = !result.numeric_failure;
  report.message = result.error;
  report.wall_seconds = seconds_since(t0);
  write_report_json(config, report);
  return report;
}

RunReport cmd_amod(const ScenarioConfig& config, const std::string& subcommand) {
  const auto t0 = Clock::now();
  if (!config.network) config_error("amod commands need a network plant");
  const amod::NetworkSpec& network = *config.network;
  amod::AmodPlant plant = amod::build_dynamics(network);
  const Dims dims = plant.dynamics.dims();
  fs::create_directories(config.out_dir);

  RunReport report;
  report.final_error = kNaN;

  if (subcommand == "build") {
    csv::write_matrix(fs::path(config.out_dir) / "a_matrix.csv", plant.dynamics.A);
    csv::write_matrix(fs::path(config.out_dir) / "b_matrix.csv", plant.dynamics.B);
    csv::write_matrix(fs::path(config.out_dir) / "l_matrix.csv", plant.dynamics.L);
    csv::write_matrix(fs::path(config.out_dir) / "e_in.csv", plant.inc.E_in);
    csv::write_matrix(fs::path(config.out_dir) / "e_out.csv", plant.inc.E_out);
    csv::Table table;
    // Actor parameter counts as published in the reference case study
    // (kd_entries counts m2 x m3 there, not the m3 x m1 gain shape).
    table.header = {"m1", "m2", "m3", "critic_params", "value_params", "kv_entries",
                    "kd_entries"};
    table.rows.push_back({csv::format_index(dims.m1), csv::format_index(dims.m2),
                          csv::format_index(dims.m3), csv::format_index(dims.critic_params()),
                          csv::format_index(dims.value_params()),
                          csv::format_index(dims.m1 * dims.m2),
                          csv::format_index(dims.m2 * dims.m3)});
    csv::write_table(fs::path(config.out_dir) / "dimensions.csv", table);
    report.manifest = {"a_matrix.csv", "b_matrix.csv", "l_matrix.csv", "e_in.csv", "e_out.csv",
                       "dimensions.csv"};
    report.message = "dimensions (" + std::to_string(dims.m1) + ", " + std::to_string(dims.m2) +
                     ", " + std::to_string(dims.m3) + "), parameters " +
                     std::to_string(dims.critic_params());
    report.ok = report.converged = true;
  } else if (subcommand == "rebalance") {
    const amod::RebalanceSolution sol = amod::solve_rebalancing(network);
    const amod::Equilibrium eq = amod::equilibrium(network, sol.R_star, config.fleet_size);
    csv::Table table;
    table.header = {"origin", "dest", "travel_time", "rate", "R_star", "mu"};
    for (Eigen::Index l = 0; l < network.links(); ++l) {
      const auto [origin, dest] = amod::NetworkSpec::link_nodes(network.n, l);
      table.rows.push_back({csv::format_index(origin), csv::format_index(dest),
                            csv::format_double(network.travel_times[l]),
                            csv::format_double(network.arrival_rates[l]),
                            csv::format_double(sol.R_star[l]), csv::format_double(sol.mu[l])});
    }
    csv::write_table(fs::path(config.out_dir) / "rebalance.csv", table);
    report.manifest = {"rebalance.csv"};
    const double worst =
        std::max({sol.residuals.primal, sol.residuals.stationarity, sol.residuals.dual,
                  sol.residuals.complementarity});
    report.final_error = worst;
    report.iterations = sol.iterations;
    report.message = "fleet lower bound " + csv::format_double(eq.fleet_lower_bound) +
                     ", worst KKT residual " + csv::format_double(worst);
    report.ok = report.converged = true;
  } else if (subcommand == "simulate") {
    std::vector<amod::RatePhase> phases = network.rate_schedule;
    if (phases.empty()) phases.push_back(amod::RatePhase{0, network.arrival_rates});
    amod::NetworkSpec phase0(network.n, network.travel_times, phases.front().rates);
    const amod::RebalanceSolution reb = amod::solve_rebalancing(phase0);
    amod::Equilibrium eq = amod::equilibrium(phase0, reb.R_star, config.fleet_size);
    amod::CoordinateShift shift = amod::make_shift(plant, eq, phases.front().rates);

    PolicyPair gains = config.gains_csv.empty() ? PolicyPair::zero(dims)
                                                : read_gains_csv(config.gains_csv, dims);
    amod::PoissonDemand demand(phases.front().rates, config.seed + 1);

    const double fleet = shift.x_bar.segment(plant.p_offset(), network.n).sum() +
                         shift.x_bar.segment(plant.g_offset(), plant.links()).sum();
    Eigen::VectorXd x = shift.x_bar;
    Trajectory traj;
    std::size_t phase_idx = 0;
    for (Eigen::Index t = 0; t < config.horizon; ++t) {
      if (phase_idx + 1 < phases.size() && phases[phase_idx + 1].start_iteration <= t) {
        ++phase_idx;
        amod::NetworkSpec spec(network.n, network.travel_times, phases[phase_idx].rates);
        const auto reb_k = amod::solve_rebalancing(spec);
        eq = amod::equilibrium(spec, reb_k.R_star, fleet);
        shift = amod::make_shift(plant, eq, phases[phase_idx].rates);
        demand.set_rates(phases[phase_idx].rates);
      }
      const Eigen::VectorXd d = demand();
      const Eigen::VectorXd v = shift.v_bar + gains.Kv * (x - shift.x_bar);
      Eigen::VectorXd x_next = step(plant.dynamics, x, v, d);
      traj.steps.push_back(Transition{x, v, d, x_next});
      x = std::move(x_next);
    }
    write_metrics_csv(fs::path(config.out_dir) / "metrics.csv",
                      amod::metrics(traj, plant, config.metrics_window));
    write_demand_csv(fs::path(config.out_dir) / "demand.csv", traj, network.n);
    report.manifest = {"metrics.csv", "demand.csv"};
    report.iterations = config.horizon;
    report.ok = report.converged = true;
  } else {
    config_error("amod subcommand must be build, rebalance or simulate");
  }

  report.wall_seconds = seconds_since(t0);
  write_report_json(config, report);
  return report;
}

RunReport cmd_bench(const ScenarioConfig& config) {
  const auto t0 = Clock::now();
  if (config.bench_dims.empty()) config_error("bench needs bench.dims");
  fs::create_directories(config.out_dir);

  const std::vector<BenchRow> rows = bench_update_cost(config.bench_dims, config.bench_repetitions);
  const BenchFit fit = fit_loglog(rows);

  csv::Table bench;
  bench.header = {"q_params", "rls_seconds", "batch_seconds"};
  for (const BenchRow& row : rows) {
    bench.rows.push_back({csv::format_index(row.q_params), csv::format_double(row.rls_seconds),
                          csv::format_double(row.batch_seconds)});
  }
  csv::write_table(fs::path(config.out_dir) / "bench.csv", bench);

  csv::Table fits;
  fits.header = {"method", "slope", "ci_low", "ci_high"};
  fits.rows.push_back({"rls", csv::format_double(fit.rls.slope),
                       csv::format_double(fit.rls.ci_low), csv::format_double(fit.rls.ci_high)});
  fits.rows.push_back({"batch", csv::format_double(fit.batch.slope),
                       csv::format_double(fit.batch.ci_low),
                       csv::format_double(fit.batch.ci_high)});
  csv::write_table(fs::path(config.out_dir) / "fit.csv", fits);

  RunReport report;
  report.ok = report.converged = true;
  report.iterations = static_cast<Eigen::Index>(rows.size());
  report.final_error = kNaN;
  report.manifest = {"bench.csv", "fit.csv"};
  report.message = "rls slope " + csv::format_double(fit.rls.slope) + ", batch slope " +
                   csv::format_double(fit.batch.slope);
  report.wall_seconds = seconds_since(t0);
  write_report_json(config, report);
  return report;
}

}  // namespace hinfq::scenario
