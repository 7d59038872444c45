#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "hinfq/csv.hpp"
#include "hinfq/scenario.hpp"
#include "test_util.hpp"

using namespace hinfq;
using namespace hinfq::scenario;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("hinfq_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ScenarioConfig small_learn_config(const std::string& out) {
  ScenarioConfig config;
  Eigen::MatrixXd a(2, 2), b(2, 1), l(2, 1);
  a << 0.6, 0.1, 0.0, 0.5;
  b << 1.0, 0.5;
  l << 0.3, 0.2;
  config.explicit_plant.emplace(a, b, l);
  config.rx = Eigen::MatrixXd::Identity(2, 2);
  config.rv = Eigen::MatrixXd::Identity(1, 1);
  config.gamma = 2.0;
  config.epsilon = 1e-9;
  config.max_iter = 2000;
  config.seed = 11;
  config.w_scalar = 0.01;
  config.compare_oracle = true;
  config.out_dir = out;
  return config;
}

std::string scalar_riccati_json(const std::string& out) {
  return std::string(R"({
    "schema": 1,
    "plant": {"type": "explicit", "A": [[0.5]], "B": [[1.0]], "L": [[0.0]]},
    "cost": {"gamma": 1.0, "R_x": [[1.0]], "R_v": [[1.0]]},
    "output_dir": ")") + out + "\"\n}";
}

}  // namespace

TEST_SUITE("scenario") {

TEST_CASE("shortest round-trip float formatting") {
  CHECK(csv::format_double(0.1) == "0.1");
  CHECK(csv::format_double(1.0 / 3.0) == "0.3333333333333333");
  CHECK(csv::format_double(-2.0) == "-2");
  CHECK(csv::format_double(std::nan("")) == "nan");
}

TEST_CASE("matrix csv round-trips") {
  Rng rng(3);
  const fs::path dir = fresh_dir("matrix");
  const Eigen::MatrixXd m = testutil::random_matrix(rng, 4, 3);
  csv::write_matrix(dir / "m.csv", m);
  const Eigen::MatrixXd back = csv::read_matrix(dir / "m.csv");
  CHECK(back.rows() == 4);
  CHECK((back - m).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gains csv round-trips") {
  Rng rng(5);
  const fs::path dir = fresh_dir("gains");
  PolicyPair policies{testutil::random_matrix(rng, 2, 3), testutil::random_matrix(rng, 1, 3)};
  write_gains_csv((dir / "gains.csv").string(), policies);
  const PolicyPair back = read_gains_csv((dir / "gains.csv").string(), Dims{3, 2, 1});
  CHECK(back.Kv.isApprox(policies.Kv));
  CHECK(back.Kd.isApprox(policies.Kd));
}

TEST_CASE("config parsing accepts the documented keys") {
  const ScenarioConfig config = parse_config_text(R"({
    "schema": 1,
    "plant": {"type": "network", "stations": 2,
              "travel_times": [1, 2], "arrival_rates": [0.5, 0.1],
              "rate_schedule": [{"start_iteration": 0, "rates": [0.5, 0.1]},
                                 {"start_iteration": 60, "rates": [0.1, 0.5]}]},
    "cost": {"gamma": 4.0, "rho": 0.05},
    "learner": {"epsilon": 1e-8, "seed": 3, "W_lambda": 0.01, "loop_iterations": 40},
    "disturbance": {"mode": "exogenous"},
    "output_dir": "somewhere"
  })");
  REQUIRE(config.network.has_value());
  CHECK(config.network->n == 2);
  CHECK(config.network->rate_schedule.size() == 2);
  CHECK(config.gamma == 4.0);
  CHECK(config.rho.value() == 0.05);
  CHECK(config.epsilon == 1e-8);
  CHECK(config.loop_iterations == 40);
  CHECK(config.mode == DisturbanceMode::kExogenous);
  CHECK(config.out_dir == "somewhere");
}

TEST_CASE("config parsing rejects unknown keys and bad schema") {
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"schema": 1, "learner": {"epsilonn": 1e-8}})"),
                       doctest::Contains("epsilonn"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text(R"({"schema": 2})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text(R"({"schema": 1, "extra": 1})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("not json"), std::invalid_argument);
}

TEST_CASE("solve-riccati command reproduces the scalar root") {
  const fs::path dir = fresh_dir("riccati_scalar");
  ScenarioConfig config = parse_config_text(scalar_riccati_json(dir.string()));
  const RunReport report = cmd_solve_riccati(config);
  CHECK(report.ok);
  CHECK(report.final_error <= 1e-9);
  const Eigen::MatrixXd p = csv::read_matrix(dir / "p_star.csv");
  CHECK(p(0, 0) == doctest::Approx((0.25 + std::sqrt(4.0625)) / 2.0).epsilon(1e-9));
  for (const auto& file : report.manifest) {
    CHECK(fs::exists(dir / file));
  }
}

TEST_CASE("solve-riccati reports one sweep for a memoryless plant") {
  const fs::path dir = fresh_dir("riccati_zero_a");
  ScenarioConfig config;
  config.explicit_plant.emplace(Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Ones(2, 1),
                                0.1 * Eigen::MatrixXd::Ones(2, 1));
  config.rx = Eigen::MatrixXd::Identity(2, 2);
  config.rv = Eigen::MatrixXd::Identity(1, 1);
  config.gamma = 2.0;
  config.out_dir = dir.string();
  const RunReport report = cmd_solve_riccati(config);
  CHECK(report.ok);
  CHECK(report.iterations == 1);
  CHECK(csv::read_matrix(dir / "p_star.csv").isApprox(Eigen::MatrixXd::Identity(2, 2), 1e-10));
}

TEST_CASE("solve-riccati surfaces a doubling suggestion for infeasible gamma") {
  const fs::path dir = fresh_dir("riccati_infeasible");
  ScenarioConfig config;
  Eigen::VectorXd ones2 = Eigen::VectorXd::Ones(2);
  config.network.emplace(2, ones2, ones2);
  config.rho = 0.05;
  config.gamma = 0.1;
  config.out_dir = dir.string();
  CHECK_THROWS_WITH_AS(cmd_solve_riccati(config), doctest::Contains("doubling"), GammaTooSmall);
}

TEST_CASE("learn command converges and writes a parseable trace") {
  const fs::path dir = fresh_dir("learn_small");
  const ScenarioConfig config = small_learn_config(dir.string());
  const RunReport report = cmd_learn(config);
  CHECK(report.ok);
  CHECK(report.converged);
  CHECK(report.final_error <= 1e-6);

  const csv::Table trace = csv::read_table(dir / "trace.csv");
  REQUIRE(trace.header.size() == 6);
  CHECK(trace.header[0] == "iteration");
  CHECK(trace.header[1] == "s_delta_norm");
  CHECK(trace.header[4] == "p_err_norm");
  CHECK(trace.rows.size() >= 2);
  const Eigen::Index p_err_col = trace.column("p_err_norm");
  CHECK(std::isfinite(trace.value(trace.rows.size() - 1, p_err_col)));
  // Every manifest entry exists and parses back as a headed CSV.
  for (const auto& file : report.manifest) {
    CHECK(fs::exists(dir / file));
    const csv::Table parsed = csv::read_table(dir / file);
    CHECK(!parsed.header.empty());
  }
}

TEST_CASE("identical config and seed give byte-identical values") {
  const fs::path dir_a = fresh_dir("learn_repeat_a");
  const fs::path dir_b = fresh_dir("learn_repeat_b");
  (void)cmd_learn(small_learn_config(dir_a.string()));
  (void)cmd_learn(small_learn_config(dir_b.string()));

  const csv::Table ta = csv::read_table(dir_a / "trace.csv");
  const csv::Table tb = csv::read_table(dir_b / "trace.csv");
  REQUIRE(ta.rows.size() == tb.rows.size());
  const auto timing = static_cast<std::size_t>(ta.column("update_seconds"));
  for (std::size_t r = 0; r < ta.rows.size(); ++r) {
    for (std::size_t c = 0; c < ta.header.size(); ++c) {
      if (c == timing) continue;
      CHECK(ta.rows[r][c] == tb.rows[r][c]);
    }
  }

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir_a / "final_s.csv") == slurp(dir_b / "final_s.csv"));
  CHECK(slurp(dir_a / "final_gains.csv") == slurp(dir_b / "final_gains.csv"));
}

TEST_CASE("an unreachable epsilon still leaves the trace on disk") {
  const fs::path dir = fresh_dir("learn_eps");
  ScenarioConfig config = small_learn_config(dir.string());
  config.epsilon = 1e-30;
  config.max_iter = 30;
  const RunReport report = cmd_learn(config);
  CHECK_FALSE(report.ok);
  CHECK_FALSE(report.converged);
  CHECK(fs::exists(dir / "trace.csv"));
  CHECK(csv::read_table(dir / "trace.csv").rows.size() == 31);
}

TEST_CASE("learn without an oracle leaves the error column unavailable") {
  const fs::path dir = fresh_dir("learn_no_oracle");
  ScenarioConfig config = small_learn_config(dir.string());
  config.compare_oracle = false;
  const RunReport report = cmd_learn(config);
  CHECK(report.ok);
  CHECK(std::isnan(report.final_error));
  const csv::Table trace = csv::read_table(dir / "trace.csv");
  CHECK(trace.rows.front()[4] == "nan");
}

TEST_CASE("amod build reports the case-study dimension table") {
  const fs::path dir = fresh_dir("amod_build");
  ScenarioConfig config;
  const Eigen::Index links = 30;
  config.network.emplace(6, Eigen::VectorXd::Ones(links), Eigen::VectorXd::Ones(links));
  config.rho = 0.05;
  config.gamma = 0.1;
  config.out_dir = dir.string();
  const RunReport report = cmd_amod(config, "build");
  CHECK(report.ok);
  const csv::Table dims = csv::read_table(dir / "dimensions.csv");
  REQUIRE(dims.rows.size() == 1);
  CHECK(dims.rows[0][0] == "66");
  CHECK(dims.rows[0][1] == "60");
  CHECK(dims.rows[0][2] == "30");
  CHECK(dims.rows[0][3] == "12246");
  CHECK(dims.rows[0][4] == "2211");
  CHECK(dims.rows[0][5] == "3960");
  CHECK(dims.rows[0][6] == "1800");
  const Eigen::MatrixXd a = csv::read_matrix(dir / "a_matrix.csv");
  CHECK(a.rows() == 66);
}

TEST_CASE("amod rebalance writes the clamped two-node solution") {
  const fs::path dir = fresh_dir("amod_rebalance");
  ScenarioConfig config;
  Eigen::VectorXd t(2), rates(2);
  t << 1.0, 1.0;
  rates << 2.0, 0.0;
  config.network.emplace(2, t, rates);
  config.rho = 0.05;
  config.gamma = 0.1;
  config.out_dir = dir.string();
  const RunReport report = cmd_amod(config, "rebalance");
  CHECK(report.ok);
  CHECK(report.final_error <= 1e-8);
  const csv::Table table = csv::read_table(dir / "rebalance.csv");
  REQUIRE(table.rows.size() == 2);
  const Eigen::Index r_col = table.column("R_star");
  CHECK(table.value(0, r_col) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(table.value(1, r_col) == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("amod simulate with zero demand holds the equilibrium") {
  const fs::path dir = fresh_dir("amod_sim");
  ScenarioConfig config;
  Eigen::VectorXd t(2);
  t << 1.0, 2.0;
  config.network.emplace(2, t, Eigen::VectorXd::Zero(2));
  config.rho = 0.05;
  config.gamma = 0.1;
  config.horizon = 20;
  config.out_dir = dir.string();
  const RunReport report = cmd_amod(config, "simulate");
  CHECK(report.ok);
  const csv::Table table = csv::read_table(dir / "metrics.csv");
  REQUIRE(table.rows.size() == 4);
  const Eigen::Index queue_col = table.column("avg_queue");
  const Eigen::Index reb_col = table.column("avg_rebalancing");
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    CHECK(table.value(r, queue_col) == 0.0);
    CHECK(table.value(r, reb_col) == 0.0);
  }
}

TEST_CASE("replay csv drives the exogenous channel of an explicit plant") {
  const fs::path dir = fresh_dir("replay");
  // Two-link replay: iteration, origin, dest, count over a complete 2-digraph.
  {
    csv::Table table;
    table.header = {"iteration", "origin", "dest", "count"};
    for (int it = 0; it < 400; ++it) {
      table.rows.push_back({std::to_string(it), "0", "1", std::to_string(it % 3)});
      if (it % 2 == 0) table.rows.push_back({std::to_string(it), "1", "0", "1"});
    }
    csv::write_table(dir / "replay.csv", table);
  }

  ScenarioConfig config;
  Eigen::MatrixXd a(2, 2), b(2, 2), l(2, 2);
  a << 0.5, 0.0, 0.1, 0.4;
  b << 1.0, 0.0, 0.0, 1.0;
  l << 0.1, 0.0, 0.0, 0.1;
  config.explicit_plant.emplace(a, b, l);
  config.rx = Eigen::MatrixXd::Identity(2, 2);
  config.rv = Eigen::MatrixXd::Identity(2, 2);
  config.gamma = 2.0;
  config.mode = DisturbanceMode::kExogenous;
  config.replay_csv = (dir / "replay.csv").string();
  config.epsilon = 1e-8;
  config.seed = 4;
  config.out_dir = (dir / "out").string();
  const RunReport report = cmd_learn(config);
  CHECK(report.ok);
  CHECK(report.converged);
}

}  // TEST_SUITE
